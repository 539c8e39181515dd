//! Exact closed-loop dynamics: the Schrödinger equation for ψ coupled to the
//! feedback law Ṙ = ε·F, plus extraction of adiabatic amplitudes
//! c_n = ⟨n[R(t)]|ψ⟩·e^{−iγ_n(t)} from a recorded trajectory.

use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{
    cumulative_trapezoid, ensure_dim, ensure_hermitian, ensure_square, wrap_angle, CMatrix,
    CVector, ZERO,
};
use crate::ode::{integrate_dopri5, sample_grid, IntegratorOptions, StepStats};
use crate::spectral::{eigenframe, gauge_align, AdiabaticFrame, HamiltonianModel};

const OBSERVABLE_TOL: f64 = 1e-12;
const EPSILON_WARN: f64 = 0.1;

/// How F enters Ṙ = ε·F.
#[derive(Debug, Clone, PartialEq)]
pub enum FeedbackForm {
    /// F = ⟨ψ|A|ψ⟩.
    LinearInExpectation,
    /// F = F(R) with no dependence on the state, given as polynomial
    /// coefficients c₀ + c₁R + c₂R² + …
    OpenLoop(Vec<f64>),
}

impl FeedbackForm {
    pub fn open_loop_value(coefficients: &[f64], r: f64) -> f64 {
        coefficients.iter().rev().fold(0.0, |acc, c| acc * r + c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackSpec {
    observable: CMatrix,
    epsilon: f64,
    form: FeedbackForm,
}

impl FeedbackSpec {
    pub fn new(observable: CMatrix, epsilon: f64, form: FeedbackForm) -> Result<Self> {
        ensure_hermitian(&observable, "observable", OBSERVABLE_TOL)?;
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::InvalidArgument(format!("epsilon must lie in [0, 1), got {epsilon}")));
        }
        Ok(FeedbackSpec {
            observable,
            epsilon,
            form,
        })
    }

    pub fn observable(&self) -> &CMatrix {
        &self.observable
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn form(&self) -> &FeedbackForm {
        &self.form
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.epsilon > EPSILON_WARN {
            out.push(format!(
                "epsilon = {} > {EPSILON_WARN}: the adiabatic reduction is not expected to hold",
                self.epsilon
            ));
        }
        out
    }

    fn feedback_value(&self, r: f64, psi: &[Complex64]) -> f64 {
        match &self.form {
            FeedbackForm::LinearInExpectation => quadratic_form(&self.observable, psi),
            FeedbackForm::OpenLoop(coefficients) => FeedbackForm::open_loop_value(coefficients, r),
        }
    }
}

fn quadratic_form(a: &CMatrix, psi: &[Complex64]) -> f64 {
    let d = psi.len();
    let mut acc = ZERO;
    for i in 0..d {
        let mut row = ZERO;
        for j in 0..d {
            row += a[(i, j)] * psi[j];
        }
        acc += psi[i].conj() * row;
    }
    acc.re
}

/// ⟨ψ|A|ψ⟩.
pub fn expectation(psi: &CVector, a_lab: &CMatrix) -> Result<f64> {
    let d = ensure_square(a_lab, "observable")?;
    ensure_dim(d, psi.len())?;
    let value = psi.dotc(&(a_lab * psi));
    let scale = 1.0 + crate::linalg::max_abs(a_lab) * psi.norm_squared();
    if value.im.abs() > 1e-12 * scale {
        return Err(Error::NotHermitian {
            what: "observable (complex expectation)".into(),
            deviation: value.im.abs(),
        });
    }
    Ok(value.re)
}

/// Time-sampled solution of the closed-loop system.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub epsilon: f64,
    pub times: Vec<f64>,
    pub states: Vec<CVector>,
    pub r_values: Vec<f64>,
    /// ‖ψ(t)‖ − 1.
    pub norm_drift: Vec<f64>,
    pub stats: StepStats,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn taus(&self) -> Vec<f64> {
        self.times.iter().map(|t| t * self.epsilon).collect()
    }

    pub fn max_norm_drift(&self) -> f64 {
        self.norm_drift.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }
}

/// Integrates iψ̇ = H[R]ψ, Ṙ = ε·F over [0, horizon] (fast time).
pub fn integrate_closed_loop(
    model: &dyn HamiltonianModel,
    feedback: &FeedbackSpec,
    psi0: &CVector,
    r0: f64,
    horizon: f64,
    opts: &IntegratorOptions,
) -> Result<Trajectory> {
    let d = model.dim();
    ensure_dim(d, psi0.len())?;
    ensure_dim(d, feedback.observable.nrows())?;
    if (psi0.norm() - 1.0).abs() > 1e-10 {
        return Err(Error::InvalidArgument(format!(
            "initial state must be normalized, norm = {}",
            psi0.norm()
        )));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
    }

    let mut y0 = vec![0.0; 2 * d + 1];
    for i in 0..d {
        y0[i] = psi0[i].re;
        y0[d + i] = psi0[i].im;
    }
    y0[2 * d] = r0;

    let epsilon = feedback.epsilon;
    let mut psi = vec![ZERO; d];
    let mut h_psi = vec![ZERO; d];
    let mut rhs = |_t: f64, y: &[f64], dy: &mut [f64]| {
        for i in 0..d {
            psi[i] = Complex64::new(y[i], y[d + i]);
        }
        let r = y[2 * d];
        model.apply(r, &psi, &mut h_psi);
        // ψ̇ = −iHψ
        for i in 0..d {
            dy[i] = h_psi[i].im;
            dy[d + i] = -h_psi[i].re;
        }
        dy[2 * d] = epsilon * feedback.feedback_value(r, &psi);
    };

    let grid = sample_grid(0.0, horizon, opts.sample_stride);
    let mut traj = Trajectory {
        epsilon,
        times: Vec::with_capacity(grid.len()),
        states: Vec::with_capacity(grid.len()),
        r_values: Vec::with_capacity(grid.len()),
        norm_drift: Vec::with_capacity(grid.len()),
        stats: StepStats::default(),
    };
    let stats = integrate_dopri5(&mut rhs, &y0, &grid, opts, |t, y| {
        let state = CVector::from_fn(d, |i, _| Complex64::new(y[i], y[d + i]));
        traj.norm_drift.push(state.norm() - 1.0);
        traj.times.push(t);
        traj.states.push(state);
        traj.r_values.push(y[2 * d]);
    })?;
    traj.stats = stats;
    if let Some(i) = traj
        .states
        .iter()
        .position(|s| s.iter().any(|z| !z.is_finite()))
    {
        return Err(Error::NonFiniteState { t: traj.times[i] });
    }
    Ok(traj)
}

/// Phase convention for the eigenvectors used in amplitude extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GaugeMode {
    /// Each frame aligned to its predecessor (discrete parallel transport).
    ParallelTransport,
    /// Every frame left in the raw eigenframe gauge.
    Raw,
}

/// Adiabatic amplitudes and derived series; indexed `[level][sample]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdiabaticSeries {
    pub times: Vec<f64>,
    pub taus: Vec<f64>,
    pub r_values: Vec<f64>,
    pub energies: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub amplitudes: Vec<Vec<Complex64>>,
    pub populations: Vec<Vec<f64>>,
    pub phases: Vec<Vec<f64>>,
    pub frame_gaps: Vec<f64>,
}

impl AdiabaticSeries {
    pub fn dim(&self) -> usize {
        self.populations.len()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Largest |Σ_n p_n − 1| over the samples.
    pub fn completeness_error(&self) -> f64 {
        (0..self.len())
            .map(|i| (self.populations.iter().map(|p| p[i]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

pub fn extract_adiabatic_series(
    traj: &Trajectory,
    model: &dyn HamiltonianModel,
    gap_tol: f64,
) -> Result<AdiabaticSeries> {
    extract_adiabatic_series_in_gauge(traj, model, gap_tol, GaugeMode::ParallelTransport)
}

pub fn extract_adiabatic_series_in_gauge(
    traj: &Trajectory,
    model: &dyn HamiltonianModel,
    gap_tol: f64,
    gauge: GaugeMode,
) -> Result<AdiabaticSeries> {
    let d = model.dim();
    let n_samples = traj.len();
    let mut frames: Vec<AdiabaticFrame> = Vec::with_capacity(n_samples);
    for (i, &r) in traj.r_values.iter().enumerate() {
        let frame = eigenframe(&model.hamiltonian(r), r, gap_tol).map_err(|e| e.at_sample(i))?;
        let frame = match (gauge, frames.last()) {
            (GaugeMode::ParallelTransport, Some(prev)) => {
                gauge_align(prev, &frame).map_err(|e| e.at_sample(i))?
            }
            _ => frame,
        };
        frames.push(frame);
    }

    let energies: Vec<Vec<f64>> = (0..d)
        .map(|n| frames.iter().map(|f| f.energies[n]).collect())
        .collect();
    let gamma: Vec<Vec<f64>> = energies
        .iter()
        .map(|e| {
            let neg: Vec<f64> = e.iter().map(|v| -v).collect();
            cumulative_trapezoid(&traj.times, &neg)
        })
        .collect();

    let mut amplitudes = vec![Vec::with_capacity(n_samples); d];
    for (i, frame) in frames.iter().enumerate() {
        let overlaps = frame.project(&traj.states[i]);
        for n in 0..d {
            amplitudes[n].push(overlaps[n] * Complex64::from_polar(1.0, -gamma[n][i]));
        }
    }
    let populations = amplitudes
        .iter()
        .map(|c| c.iter().map(|z| z.norm_sqr()).collect())
        .collect();
    let phases = amplitudes.iter().map(|c| unwrap_phases(c)).collect();

    Ok(AdiabaticSeries {
        times: traj.times.clone(),
        taus: traj.taus(),
        r_values: traj.r_values.clone(),
        energies,
        gamma,
        amplitudes,
        populations,
        phases,
        frame_gaps: frames.iter().map(|f| f.min_gap).collect(),
    })
}

/// Argument of each amplitude, continued along the nearest branch.
/// Samples with vanishing modulus keep the previous phase.
pub fn unwrap_phases(values: &[Complex64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut prev_raw = 0.0;
    let mut current = 0.0;
    for (i, z) in values.iter().enumerate() {
        if z.norm() < 1e-300 {
            out.push(current);
            continue;
        }
        let raw = z.arg();
        if i == 0 || out.is_empty() {
            current = raw;
        } else {
            current += wrap_angle(raw - prev_raw);
        }
        prev_raw = raw;
        out.push(current);
    }
    out
}

/// Default averaging window: 20 periods of the fastest-closing gap, in slow time.
pub fn default_window(epsilon: f64, min_gap: f64) -> f64 {
    20.0 * epsilon * (2.0 * std::f64::consts::PI / min_gap)
}

/// Values that can be averaged over a window.
pub trait WindowValue: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<f64, Output = Self> {
    fn zero() -> Self;
}

impl WindowValue for f64 {
    fn zero() -> Self {
        0.0
    }
}

impl WindowValue for Complex64 {
    fn zero() -> Self {
        ZERO
    }
}

/// Centered moving average of width `tau_f` over the piecewise-linear
/// interpolant of `values`; windows are truncated at the ends.
pub fn window_average<T: WindowValue>(taus: &[f64], values: &[T], tau_f: f64) -> Result<Vec<T>> {
    ensure_dim(taus.len(), values.len())?;
    let n = taus.len();
    if n < 2 {
        return Err(Error::InvalidArgument("series needs at least two samples".into()));
    }
    let span = taus[n - 1] - taus[0];
    if !(tau_f > 0.0) {
        return Err(Error::InvalidArgument(format!("window must be positive, got {tau_f}")));
    }
    if tau_f > 0.5 * span {
        return Err(Error::WindowTooWide { window: tau_f, span });
    }
    let mean_spacing = span / (n - 1) as f64;
    if tau_f < 10.0 * mean_spacing * (1.0 - 1e-9) {
        return Err(Error::WindowTooNarrow {
            window: tau_f,
            min_samples: 10,
        });
    }

    let mut prefix = Vec::with_capacity(n);
    let mut acc = T::zero();
    prefix.push(acc);
    for i in 1..n {
        acc = acc + (values[i] + values[i - 1]) * (0.5 * (taus[i] - taus[i - 1]));
        prefix.push(acc);
    }
    let integral_to = |x: f64| -> T {
        let hi = taus.partition_point(|&v| v < x).clamp(1, n - 1);
        let lo = hi - 1;
        let w = (x - taus[lo]) / (taus[hi] - taus[lo]);
        let vx = values[lo] * (1.0 - w) + values[hi] * w;
        prefix[lo] + (values[lo] + vx) * (0.5 * (x - taus[lo]))
    };

    let half = 0.5 * tau_f;
    Ok(taus
        .iter()
        .map(|&tau| {
            let lo = (tau - half).max(taus[0]);
            let hi = (tau + half).min(taus[n - 1]);
            (integral_to(hi) - integral_to(lo)) * (1.0 / (hi - lo))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{pauli_x, pauli_y, pauli_z, real_matrix, ONE};

    struct Lin {
        h0: CMatrix,
        v: CMatrix,
    }

    impl HamiltonianModel for Lin {
        fn dim(&self) -> usize {
            self.h0.nrows()
        }
        fn hamiltonian(&self, r: f64) -> CMatrix {
            &self.h0 + &self.v * Complex64::new(r, 0.0)
        }
        fn derivative(&self, _r: f64) -> CMatrix {
            self.v.clone()
        }
    }

    fn half(m: CMatrix) -> CMatrix {
        m * Complex64::new(0.5, 0.0)
    }

    #[test]
    fn expectation_cases() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let psi = CVector::from_vec(vec![Complex64::new(s, 0.0), Complex64::new(0.0, s)]);
        assert!((expectation(&psi, &CMatrix::identity(2, 2)).unwrap() - 1.0).abs() < 1e-15);
        assert!(expectation(&psi, &pauli_x()).unwrap().abs() < 1e-15);
        let up = CVector::from_vec(vec![ONE, ZERO]);
        assert_eq!(expectation(&up, &pauli_z()).unwrap(), 1.0);
        assert!(expectation(&up, &CMatrix::identity(3, 3)).is_err());
        // ⟨ψ|J|ψ⟩ is imaginary for real antisymmetric J and this ψ
        let skew = real_matrix(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!(expectation(&psi, &skew).is_err());
    }

    #[test]
    fn zero_epsilon_freezes_r() {
        let model = Lin {
            h0: half(pauli_x()),
            v: half(pauli_z()),
        };
        let fb = FeedbackSpec::new(pauli_z(), 0.0, FeedbackForm::LinearInExpectation).unwrap();
        let frame = eigenframe(&model.hamiltonian(0.3), 0.3, 1e-8).unwrap();
        let psi0 = frame.vector(0);
        let traj =
            integrate_closed_loop(&model, &fb, &psi0, 0.3, 10.0, &IntegratorOptions::default())
                .unwrap();
        assert!(traj.r_values.iter().all(|&r| r == 0.3));
        let series = extract_adiabatic_series(&traj, &model, 1e-8).unwrap();
        for &p in &series.populations[0] {
            assert!((p - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_hamiltonian_matches_matrix_exponential() {
        let h = CMatrix::from_row_slice(
            3,
            3,
            &[
                Complex64::new(0.2, 0.0),
                Complex64::new(0.3, 0.1),
                ZERO,
                Complex64::new(0.3, -0.1),
                Complex64::new(-0.5, 0.0),
                Complex64::new(0.0, 0.4),
                ZERO,
                Complex64::new(0.0, -0.4),
                Complex64::new(1.1, 0.0),
            ],
        );
        let model = Lin {
            h0: h.clone(),
            v: CMatrix::zeros(3, 3),
        };
        let fb = FeedbackSpec::new(CMatrix::zeros(3, 3), 0.01, FeedbackForm::OpenLoop(vec![0.0]))
            .unwrap();
        let psi0 = CVector::from_vec(vec![
            Complex64::new(0.6, 0.0),
            Complex64::new(0.0, 0.8),
            ZERO,
        ]);
        let horizon = 50.0;
        let traj =
            integrate_closed_loop(&model, &fb, &psi0, 0.0, horizon, &IntegratorOptions::default())
                .unwrap();

        // oracle: e^{−iHt}ψ₀ through the eigendecomposition of H
        let frame = eigenframe(&h, 0.0, 1e-8).unwrap();
        for (i, &t) in traj.times.iter().enumerate().step_by(10) {
            let coeffs = frame.project(&psi0);
            let evolved = CVector::from_fn(3, |n, _| {
                coeffs[n] * Complex64::from_polar(1.0, -frame.energies[n] * t)
            });
            let expected = &frame.vectors * evolved;
            assert!((&traj.states[i] - expected).norm() < 1e-8);
        }
        assert!(traj.max_norm_drift() < 1e-7);
    }

    #[test]
    fn stationary_eigenstate_amplitude() {
        let model = Lin {
            h0: half(pauli_x()),
            v: CMatrix::zeros(2, 2),
        };
        let fb = FeedbackSpec::new(pauli_z(), 0.0, FeedbackForm::LinearInExpectation).unwrap();
        let frame = eigenframe(&model.hamiltonian(0.0), 0.0, 1e-8).unwrap();
        let traj = integrate_closed_loop(
            &model,
            &fb,
            &frame.vector(0),
            0.0,
            100.0,
            &IntegratorOptions::default(),
        )
        .unwrap();
        let s = extract_adiabatic_series(&traj, &model, 1e-8).unwrap();
        for i in 0..s.len() {
            assert!((s.amplitudes[0][i] - ONE).norm() < 1e-8);
            assert!(s.phases[0][i].abs() < 1e-8);
        }
        assert!(s.completeness_error() < 1e-7);
    }

    #[test]
    fn populations_do_not_depend_on_gauge_mode() {
        let model = Lin {
            h0: half(pauli_x()),
            v: half(pauli_y()),
        };
        let fb = FeedbackSpec::new(pauli_z(), 0.01, FeedbackForm::LinearInExpectation).unwrap();
        let psi0 = CVector::from_vec(vec![Complex64::new(0.8, 0.0), Complex64::new(0.0, 0.6)]);
        let traj =
            integrate_closed_loop(&model, &fb, &psi0, 0.0, 100.0, &IntegratorOptions::default())
                .unwrap();
        let pt = extract_adiabatic_series(&traj, &model, 1e-8).unwrap();
        let raw = extract_adiabatic_series_in_gauge(&traj, &model, 1e-8, GaugeMode::Raw).unwrap();
        for n in 0..2 {
            for i in 0..pt.len() {
                assert!((pt.populations[n][i] - raw.populations[n][i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_inputs() {
        let model = Lin {
            h0: half(pauli_x()),
            v: half(pauli_z()),
        };
        let fb = FeedbackSpec::new(pauli_z(), 0.01, FeedbackForm::LinearInExpectation).unwrap();
        let unnormalized = CVector::from_vec(vec![ONE, ONE]);
        assert!(integrate_closed_loop(&model, &fb, &unnormalized, 0.0, 1.0, &Default::default())
            .is_err());
        let up = CVector::from_vec(vec![ONE, ZERO]);
        assert!(integrate_closed_loop(&model, &fb, &up, 0.0, 0.0, &Default::default()).is_err());
        assert!(FeedbackSpec::new(real_matrix(2, 2, &[0.0, 1.0, 0.0, 0.0]), 0.01, FeedbackForm::LinearInExpectation).is_err());
        assert!(FeedbackSpec::new(pauli_z(), -0.1, FeedbackForm::LinearInExpectation).is_err());
        let loud = FeedbackSpec::new(pauli_z(), 0.5, FeedbackForm::LinearInExpectation).unwrap();
        assert_eq!(loud.warnings().len(), 1);
    }

    #[test]
    fn extraction_reports_degenerate_sample() {
        // H = R σz crosses zero at R = 0
        let model = Lin {
            h0: CMatrix::zeros(2, 2),
            v: pauli_z(),
        };
        let fb = FeedbackSpec::new(pauli_z(), 0.1, FeedbackForm::OpenLoop(vec![1.0])).unwrap();
        let up = CVector::from_vec(vec![ONE, ZERO]);
        let opts = IntegratorOptions {
            sample_stride: 1.0,
            ..Default::default()
        };
        let traj = integrate_closed_loop(&model, &fb, &up, -1.0, 20.0, &opts).unwrap();
        let err = extract_adiabatic_series(&traj, &model, 1e-8).unwrap_err();
        match err {
            Error::AtSample { index, source } => {
                assert_eq!(index, 10);
                assert!(matches!(*source, Error::DegenerateSpectrum { .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unwrap_keeps_continuity() {
        let values: Vec<Complex64> = (0..200)
            .map(|i| Complex64::from_polar(1.0, 0.1 * i as f64))
            .collect();
        let ph = unwrap_phases(&values);
        for (i, p) in ph.iter().enumerate() {
            assert!((p - 0.1 * i as f64).abs() < 1e-12);
        }
        assert!(ph.windows(2).all(|w| (w[1] - w[0]).abs() <= std::f64::consts::PI));
    }

    #[test]
    fn window_average_cases() {
        let taus: Vec<f64> = (0..=1000).map(|i| i as f64 * 0.01).collect();
        let constant = vec![2.5; taus.len()];
        let avg = window_average(&taus, &constant, 0.5).unwrap();
        assert!(avg.iter().all(|v| (v - 2.5).abs() < 1e-13));

        let period = 0.25;
        let sine: Vec<f64> = taus
            .iter()
            .map(|t| (2.0 * std::f64::consts::PI * t / period).sin())
            .collect();
        let avg = window_average(&taus, &sine, 2.0 * period).unwrap();
        for (i, &t) in taus.iter().enumerate() {
            if t > period && t < 10.0 - period {
                assert!(avg[i].abs() < 1e-3, "t = {t}: {}", avg[i]);
            }
        }

        assert!(matches!(
            window_average(&taus, &sine, 6.0),
            Err(Error::WindowTooWide { .. })
        ));
        assert!(matches!(
            window_average(&taus, &sine, 0.05),
            Err(Error::WindowTooNarrow { .. })
        ));

        let complex: Vec<Complex64> = taus.iter().map(|_| Complex64::new(1.0, -1.0)).collect();
        let avg = window_average(&taus, &complex, 0.5).unwrap();
        assert!(avg.iter().all(|z| (z - Complex64::new(1.0, -1.0)).norm() < 1e-13));
    }
}
