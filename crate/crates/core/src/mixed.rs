//! Mixed-state reduced dynamics.
//!
//! The density-matrix amplitudes c̄_{nm} = ⟨n|ρ|m⟩e^{iγ_m−iγ_n} obey a
//! quadratic flow built from the connection and the adiabatic-basis
//! observable; the slow coordinate drifts with Σ_l c̄_{ll}A_{ll}. Scenarios
//! can be given directly by their connection so that no concrete
//! Hamiltonian is needed.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{ensure_dim, ensure_hermitian, hermitian_deviation, CMatrix, CVector, ZERO};
use crate::spectral::{payoff_matrices, ConnectionMatrix, PayoffMatrices};

pub const STATE_TOL: f64 = 1e-9;
pub const TRACE_DRIFT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct MixedAmplitudes {
    pub cbar: CMatrix,
    pub r_bar: f64,
}

impl MixedAmplitudes {
    pub fn new(cbar: CMatrix, r_bar: f64) -> Result<Self> {
        ensure_hermitian(&cbar, "mixed amplitudes", STATE_TOL)?;
        let trace = trace(&cbar);
        if (trace.re - 1.0).abs() > STATE_TOL || trace.im.abs() > STATE_TOL {
            return Err(Error::Value(format!("mixed amplitudes have trace {trace}")));
        }
        for l in 0..cbar.nrows() {
            let p = cbar[(l, l)].re;
            if !(-STATE_TOL..=1.0 + STATE_TOL).contains(&p) {
                return Err(Error::Value(format!("diagonal entry {l} = {p} outside [0, 1]")));
            }
        }
        Ok(MixedAmplitudes { cbar, r_bar })
    }

    /// c̄ = c c†.
    pub fn pure(amplitudes: &CVector, r_bar: f64) -> Result<Self> {
        MixedAmplitudes::new(amplitudes * amplitudes.adjoint(), r_bar)
    }

    /// c̄ = (1 − η)·1/d + η c c†.
    pub fn pseudo_pure(eta: f64, amplitudes: &CVector, r_bar: f64) -> Result<Self> {
        check_eta(eta)?;
        let d = amplitudes.len();
        let mixed = CMatrix::identity(d, d) * Complex64::from((1.0 - eta) / d as f64)
            + amplitudes * amplitudes.adjoint() * Complex64::from(eta);
        MixedAmplitudes::new(mixed, r_bar)
    }

    pub fn maximally_mixed(d: usize, r_bar: f64) -> Self {
        MixedAmplitudes {
            cbar: CMatrix::identity(d, d) * Complex64::from(1.0 / d as f64),
            r_bar,
        }
    }

    pub fn dim(&self) -> usize {
        self.cbar.nrows()
    }

    pub fn populations(&self) -> Vec<f64> {
        (0..self.dim()).map(|l| self.cbar[(l, l)].re).collect()
    }
}

fn trace(m: &CMatrix) -> Complex64 {
    (0..m.nrows()).map(|i| m[(i, i)]).sum()
}

fn check_eta(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::InvalidArgument(format!("eta must lie in (0, 1], got {eta}")));
    }
    Ok(())
}

/// Connection, observable and (optionally) the spectrum behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedScenario {
    pub connection: ConnectionMatrix,
    pub a_ad: CMatrix,
    pub energies: Option<Vec<f64>>,
    pub energy_slopes: Option<Vec<f64>>,
}

impl MixedScenario {
    pub fn new(connection: ConnectionMatrix, a_ad: CMatrix) -> Result<Self> {
        ensure_hermitian(&a_ad, "observable", STATE_TOL)?;
        ensure_dim(connection.dim(), a_ad.nrows())?;
        Ok(MixedScenario {
            connection,
            a_ad,
            energies: None,
            energy_slopes: None,
        })
    }

    /// Scenario driven by the hybrid observable A = −∂_R H.
    pub fn hybrid(connection: ConnectionMatrix, energies: Vec<f64>, energy_slopes: Vec<f64>) -> Result<Self> {
        let a_ad = hybrid_observable(&energies, &energy_slopes, &connection)?;
        Ok(MixedScenario {
            connection,
            a_ad,
            energies: Some(energies),
            energy_slopes: Some(energy_slopes),
        })
    }

    pub fn dim(&self) -> usize {
        self.connection.dim()
    }

    pub fn payoffs(&self) -> Result<PayoffMatrices> {
        payoff_matrices(&self.connection, &self.a_ad)
    }
}

/// A(n,l) = (E_n − E_l)·⟨n|l'⟩ off the diagonal, A(l,l) = slopes[l].
pub fn hybrid_observable(
    energies: &[f64],
    energy_slopes: &[f64],
    connection: &ConnectionMatrix,
) -> Result<CMatrix> {
    let d = connection.dim();
    ensure_dim(d, energies.len())?;
    ensure_dim(d, energy_slopes.len())?;
    let a = CMatrix::from_fn(d, d, |n, l| {
        if n == l {
            Complex64::from(energy_slopes[l])
        } else {
            connection.get(n, l) * (energies[n] - energies[l])
        }
    });
    let deviation = hermitian_deviation(&a);
    if deviation > 1e-12 {
        return Err(Error::NotHermitian {
            what: "hybrid observable".into(),
            deviation,
        });
    }
    Ok(a)
}

/// η²·A.
pub fn pseudo_pure_map(eta: f64, a_ad: &CMatrix) -> Result<CMatrix> {
    check_eta(eta)?;
    Ok(a_ad * Complex64::from(eta * eta))
}

/// Returns (dc̄/dτ, dR̄/dτ).
pub fn mixed_rhs(state: &MixedAmplitudes, scenario: &MixedScenario) -> Result<(CMatrix, f64)> {
    let d = state.dim();
    ensure_dim(scenario.dim(), d)?;
    Ok(velocity(&state.cbar, &scenario.connection, &scenario.a_ad))
}

fn velocity(c: &CMatrix, connection: &ConnectionMatrix, a: &CMatrix) -> (CMatrix, f64) {
    let d = c.nrows();
    let conn = |l: usize, n: usize| connection.get(l, n);
    let r_dot: f64 = (0..d).map(|l| c[(l, l)].re * a[(l, l)].re).sum();
    let mut v = CMatrix::zeros(d, d);
    for n in 0..d {
        for m in 0..d {
            let mut acc = ZERO;
            for l in 0..d {
                let product = c[(n, l)] * c[(l, m)];
                if l != n {
                    acc -= conn(n, l) * a[(l, n)] * product;
                }
                if l != m {
                    // ⟨l'|m⟩ = −⟨l|m'⟩
                    acc += conn(l, m) * product * a[(m, l)];
                }
            }
            // ⟨n|n'⟩ + ⟨m'|m⟩ with ⟨m'|m⟩ = −⟨m|m'⟩ on the imaginary diagonal
            acc -= c[(n, m)] * (conn(n, n) - conn(m, m)) * r_dot;
            v[(n, m)] = acc;
        }
    }
    (v, r_dot)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedPath {
    pub taus: Vec<f64>,
    pub states: Vec<MixedAmplitudes>,
    /// Largest Hermiticity correction applied by re-symmetrization.
    pub max_asymmetry: f64,
    /// trace(c̄) − 1 per sample.
    pub trace_drift: Vec<f64>,
    /// Smallest eigenvalue of c̄ per sample.
    pub min_eigenvalue: Vec<f64>,
}

impl MixedPath {
    pub fn entry(&self, n: usize, m: usize) -> Vec<Complex64> {
        self.states.iter().map(|s| s.cbar[(n, m)]).collect()
    }

    pub fn population(&self, l: usize) -> Vec<f64> {
        self.states.iter().map(|s| s.cbar[(l, l)].re).collect()
    }

    pub fn r_bar(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.r_bar).collect()
    }

    pub fn final_state(&self) -> &MixedAmplitudes {
        self.states.last().expect("path is never empty")
    }

    pub fn max_trace_drift(&self) -> f64 {
        self.trace_drift.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_off_diagonal(&self, sample: usize) -> f64 {
        let c = &self.states[sample].cbar;
        let d = c.nrows();
        let mut worst: f64 = 0.0;
        for n in 0..d {
            for m in 0..d {
                if n != m {
                    worst = worst.max(c[(n, m)].norm());
                }
            }
        }
        worst
    }
}

fn min_eigenvalue(c: &CMatrix) -> f64 {
    c.clone()
        .symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Fixed-step RK4 with per-step re-symmetrization.
pub fn integrate_mixed(
    initial: &MixedAmplitudes,
    scenario: &MixedScenario,
    horizon_tau: f64,
    step: f64,
) -> Result<MixedPath> {
    let d = initial.dim();
    ensure_dim(scenario.dim(), d)?;
    if !(step > 0.0) || !(horizon_tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step and horizon must be positive (step {step}, horizon {horizon_tau})"
        )));
    }
    let n_steps = ((horizon_tau / step) - 1e-9).ceil().max(1.0) as usize;
    let h = horizon_tau / n_steps as f64;
    let conn = &scenario.connection;
    let a = &scenario.a_ad;

    let mut taus = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut trace_drift = Vec::with_capacity(n_steps + 1);
    let mut min_eig = Vec::with_capacity(n_steps + 1);
    taus.push(0.0);
    trace_drift.push(trace(&initial.cbar).re - 1.0);
    min_eig.push(min_eigenvalue(&initial.cbar));
    states.push(initial.clone());

    let mut c = initial.cbar.clone();
    let mut r = initial.r_bar;
    let mut max_asymmetry: f64 = 0.0;
    let half = Complex64::from(0.5 * h);
    let full = Complex64::from(h);
    for step_index in 1..=n_steps {
        let tau = step_index as f64 * h;
        let (k1, r1) = velocity(&c, conn, a);
        let (k2, r2) = velocity(&(&c + &k1 * half), conn, a);
        let (k3, r3) = velocity(&(&c + &k2 * half), conn, a);
        let (k4, r4) = velocity(&(&c + &k3 * full), conn, a);
        c += (k1 + (k2 + k3) * Complex64::from(2.0) + k4) * Complex64::from(h / 6.0);
        r += h / 6.0 * (r1 + 2.0 * (r2 + r3) + r4);
        if c.iter().any(|z| !z.is_finite()) || !r.is_finite() {
            return Err(Error::NonFiniteState { t: tau });
        }

        let symmetric = (&c + c.adjoint()) * Complex64::from(0.5);
        max_asymmetry = max_asymmetry.max((&c - &symmetric).iter().fold(0.0, |m, z| m.max(z.norm())));
        c = symmetric;

        let drift = trace(&c).re - 1.0;
        if drift.abs() > TRACE_DRIFT_TOL {
            return Err(Error::TraceDrift { tau, drift });
        }
        taus.push(tau);
        trace_drift.push(drift);
        min_eig.push(min_eigenvalue(&c));
        states.push(MixedAmplitudes {
            cbar: c.clone(),
            r_bar: r,
        });
    }
    Ok(MixedPath {
        taus,
        states,
        max_asymmetry,
        trace_drift,
        min_eigenvalue: min_eig,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::I;
    use crate::reduced::{integrate_reduced, PayoffSource, SimplexState};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn spectator() -> MixedScenario {
        let conn = ConnectionMatrix::from_upper(3, |l, n| if (l, n) == (1, 2) { c(1.0, 0.0) } else { ZERO });
        MixedScenario::hybrid(conn, vec![0.0, 1.0, 2.5], vec![0.0; 3]).unwrap()
    }

    fn spectator_initial() -> MixedAmplitudes {
        let mut m = CMatrix::from_element(3, 3, c(0.1, 0.0));
        m[(0, 0)] = c(0.2, 0.0);
        m[(1, 1)] = c(0.5, 0.0);
        m[(2, 2)] = c(0.3, 0.0);
        MixedAmplitudes::new(m, 0.0).unwrap()
    }

    #[test]
    fn hybrid_observable_two_level() {
        let conn = ConnectionMatrix::from_upper(2, |_, _| c(0.5, 0.0));
        let a = hybrid_observable(&[0.0, 1.0], &[0.0, 0.0], &conn).unwrap();
        assert_eq!(a[(0, 1)], c(-0.5, 0.0));
        assert_eq!(a[(1, 0)], c(-0.5, 0.0));
        let p = payoff_matrices(&conn, &a).unwrap();
        assert_eq!(p.a[(0, 1)], 0.5);
        assert_eq!(p.b[(0, 1)], 0.0);
    }

    #[test]
    fn hybrid_observable_equal_energies() {
        let conn = ConnectionMatrix::from_upper(3, |l, n| c(0.3 * (l + n) as f64, 0.2));
        let a = hybrid_observable(&[1.0; 3], &[0.1, 0.2, 0.3], &conn).unwrap();
        for n in 0..3 {
            for l in 0..3 {
                if n != l {
                    assert_eq!(a[(n, l)], ZERO);
                }
            }
        }
        assert!(hybrid_observable(&[1.0; 2], &[0.0; 3], &conn).is_err());
    }

    #[test]
    fn identity_has_zero_velocity() {
        let s = spectator();
        let (v, _) = mixed_rhs(&MixedAmplitudes::maximally_mixed(3, 0.0), &s).unwrap();
        assert!(v.iter().all(|z| z.norm() < 1e-16));
    }

    #[test]
    fn diagonal_state_with_diagonal_observable() {
        let conn = ConnectionMatrix::from_upper(3, |_, _| c(0.4, -0.1));
        let a = CMatrix::from_diagonal(&CVector::from_vec(vec![c(1.0, 0.0), c(-0.5, 0.0), c(0.2, 0.0)]));
        let s = MixedScenario::new(conn, a).unwrap();
        let st = MixedAmplitudes::new(
            CMatrix::from_diagonal(&CVector::from_vec(vec![c(0.2, 0.0), c(0.3, 0.0), c(0.5, 0.0)])),
            0.0,
        )
        .unwrap();
        let (v, r) = mixed_rhs(&st, &s).unwrap();
        assert!(v.iter().all(|z| z.norm() == 0.0));
        assert!((r - (0.2 - 0.15 + 0.1)).abs() < 1e-15);
    }

    #[test]
    fn identity_is_stationary() {
        let path = integrate_mixed(&MixedAmplitudes::maximally_mixed(3, 0.0), &spectator(), 50.0, 1e-2).unwrap();
        let third = 1.0 / 3.0;
        for s in &path.states {
            for n in 0..3 {
                for m in 0..3 {
                    let expected = if n == m { third } else { 0.0 };
                    assert!((s.cbar[(n, m)] - c(expected, 0.0)).norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn spectator_constants() {
        let path = integrate_mixed(&spectator_initial(), &spectator(), 30.0, 1e-3).unwrap();
        let c11 = path.population(0);
        let c22 = path.population(1);
        let c33 = path.population(2);
        for i in 0..path.taus.len() {
            assert!((c11[i] - 0.2).abs() < 1e-8);
            assert!((c22[i] + c33[i] - 0.8).abs() < 1e-8);
        }
        assert!(path.final_state().cbar[(1, 2)].norm() < 1e-3);
        assert!(path.max_trace_drift() < 1e-6);
        assert!(path.max_asymmetry < 1e-9);
    }

    #[test]
    fn pure_initial_data_matches_reduced() {
        let conn = ConnectionMatrix::from_upper(3, |l, n| [c(0.5, 0.1), c(0.3, -0.2), c(0.7, 0.0)][l + n - 1]);
        let s = MixedScenario::hybrid(conn, vec![0.0, 1.0, 2.5], vec![0.1, -0.2, 0.05]).unwrap();
        let amps = CVector::from_vec(vec![c(0.5, 0.0), c(0.6, 0.1), c(0.0, 0.0)]);
        let amps = &amps / Complex64::from(amps.norm());
        let initial = MixedAmplitudes::pure(&amps, 0.0).unwrap();
        let path = integrate_mixed(&initial, &s, 10.0, 1e-3).unwrap();

        let p0: Vec<f64> = amps.iter().map(|z| z.norm_sqr()).collect();
        let source = PayoffSource::constant(
            s.payoffs().unwrap(),
            (0..3).map(|l| s.a_ad[(l, l)].re).collect(),
        )
        .unwrap();
        let red = integrate_reduced(&SimplexState::new(p0, vec![0.0; 3], 0.0).unwrap(), &source, 10.0, 1e-3).unwrap();
        for i in (0..path.taus.len()).step_by(500) {
            for l in 0..3 {
                assert!((path.population(l)[i] - red.states[i].p[l]).abs() < 1e-6);
            }
            assert!((path.states[i].r_bar - red.states[i].r_bar).abs() < 1e-6);
        }
    }

    #[test]
    fn gauge_diagonal_changes_only_phases() {
        let conn = ConnectionMatrix::from_upper(2, |_, _| c(0.5, 0.2));
        let s = MixedScenario::hybrid(conn.clone(), vec![0.0, 1.0], vec![0.3, -0.4]).unwrap();
        let mut shifted = s.clone();
        shifted.connection = conn.with_diagonal(&[0.7, -1.3]);
        let amps = CVector::from_vec(vec![c(0.6, 0.0), c(0.0, 0.8)]);
        let initial = MixedAmplitudes::pure(&amps, 0.0).unwrap();
        let a = integrate_mixed(&initial, &s, 5.0, 1e-3).unwrap();
        let b = integrate_mixed(&initial, &shifted, 5.0, 1e-3).unwrap();
        let mut phase_moved = false;
        for i in 0..a.taus.len() {
            for n in 0..2 {
                for m in 0..2 {
                    let (x, y) = (a.states[i].cbar[(n, m)], b.states[i].cbar[(n, m)]);
                    assert!((x.norm() - y.norm()).abs() < 1e-9);
                    phase_moved |= (x - y).norm() > 1e-3;
                }
            }
        }
        assert!(phase_moved);
    }

    #[test]
    fn pseudo_pure_map_cases() {
        let a = CMatrix::from_row_slice(2, 2, &[c(1.0, 0.0), I, -I, c(-2.0, 0.0)]);
        assert_eq!(pseudo_pure_map(1.0, &a).unwrap(), a);
        assert_eq!(pseudo_pure_map(0.5, &a).unwrap(), &a * Complex64::from(0.25));
        assert!(pseudo_pure_map(0.0, &a).is_err());
        assert!(pseudo_pure_map(1.5, &a).is_err());
    }

    #[test]
    fn invalid_states() {
        let bad_trace = CMatrix::identity(2, 2);
        assert!(MixedAmplitudes::new(bad_trace, 0.0).is_err());
        let non_hermitian = CMatrix::from_row_slice(2, 2, &[c(0.5, 0.0), c(0.1, 0.0), c(0.2, 0.0), c(0.5, 0.0)]);
        assert!(MixedAmplitudes::new(non_hermitian, 0.0).is_err());
        let conn = ConnectionMatrix::from_upper(2, |_, _| ZERO);
        assert!(MixedScenario::new(conn, CMatrix::from_row_slice(2, 2, &[ZERO, I, I, ZERO])).is_err());
    }
}
