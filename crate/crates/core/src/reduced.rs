//! Leading-order adiabatic dynamics under linear feedback.
//!
//! Level populations follow the replicator equation
//! `ṗ_l = p_l Σ_n a_{ln} p_n` with the antisymmetric payoff matrix built in
//! [`crate::spectral::payoff_matrices`]; phases follow
//! `φ̇_l = i⟨l|l'⟩Ṙ − Σ_{n≠l} p_n b_{ln}` and the slow coordinate drifts as
//! `Ṙ = Σ_n p_n A_{nn}`. All derivatives are with respect to τ = εt.
//!
//! The analysis helpers cover time averages, interior fixed points of the
//! zero-sum game, the relative-entropy invariant and the long-time
//! classification into conservative orbits versus extinction.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{cumulative_trapezoid, ensure_dim, interp_linear, CMatrix};
use crate::spectral::{
    adiabatic_matrix, connection_analytic, eigenframe, payoff_matrices, HamiltonianModel,
    PayoffMatrices,
};

pub const SIMPLEX_TOL: f64 = 1e-9;
const CLAMP_TOL: f64 = 1e-9;

/// Populations, phases and slow coordinate of the reduced system.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexState {
    pub p: Vec<f64>,
    pub phi: Vec<f64>,
    pub r_bar: f64,
}

impl SimplexState {
    pub fn new(p: Vec<f64>, phi: Vec<f64>, r_bar: f64) -> Result<Self> {
        ensure_dim(p.len(), phi.len())?;
        check_simplex(&p, 0.0)?;
        Ok(SimplexState { p, phi, r_bar })
    }

    /// From amplitudes c_n = √p_n e^{iφ_n}.
    pub fn from_amplitudes(c: &[Complex64], r_bar: f64) -> Result<Self> {
        let p = c.iter().map(|z| z.norm_sqr()).collect();
        let phi = c.iter().map(|z| z.arg()).collect();
        SimplexState::new(p, phi, r_bar)
    }

    pub fn dim(&self) -> usize {
        self.p.len()
    }

    pub fn amplitudes(&self) -> Vec<Complex64> {
        self.p
            .iter()
            .zip(&self.phi)
            .map(|(p, phi)| Complex64::from_polar(p.sqrt(), *phi))
            .collect()
    }
}

fn check_simplex(p: &[f64], tau: f64) -> Result<()> {
    if let Some(v) = p.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::SimplexViolation {
            tau,
            detail: format!("negative or non-finite population {v}"),
        });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::SimplexViolation {
            tau,
            detail: format!("populations sum to {sum}"),
        });
    }
    Ok(())
}

/// v_l = p_l Σ_n a_{ln} p_n.
pub fn replicator_rhs(p: &[f64], a: &DMatrix<f64>) -> Result<Vec<f64>> {
    ensure_dim(a.nrows(), p.len())?;
    ensure_dim(a.ncols(), p.len())?;
    Ok(replicator(p, a))
}

fn replicator(p: &[f64], a: &DMatrix<f64>) -> Vec<f64> {
    let d = p.len();
    (0..d)
        .map(|l| p[l] * (0..d).map(|n| a[(l, n)] * p[n]).sum::<f64>())
        .collect()
}

/// Where the reduced system takes its coefficients from.
pub enum PayoffSource<'a> {
    /// Fixed a, b and diagonal A_{nn}.
    Constant {
        payoffs: PayoffMatrices,
        a_diag: Vec<f64>,
    },
    /// Rebuilt from the eigenframe of H[R̄] at every evaluation.
    FrameDependent {
        model: &'a dyn HamiltonianModel,
        observable: CMatrix,
        gap_tol: f64,
    },
}

/// Coefficients at one R̄.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalCoefficients {
    pub payoffs: PayoffMatrices,
    pub a_diag: Vec<f64>,
    /// Im⟨l|∂_R l⟩ of the connection in use (zero in the parallel-transport gauge).
    pub connection_diag_im: Vec<f64>,
}

impl<'a> PayoffSource<'a> {
    pub fn constant(payoffs: PayoffMatrices, a_diag: Vec<f64>) -> Result<Self> {
        ensure_dim(payoffs.dim(), a_diag.len())?;
        Ok(PayoffSource::Constant { payoffs, a_diag })
    }

    pub fn dim(&self) -> usize {
        match self {
            PayoffSource::Constant { payoffs, .. } => payoffs.dim(),
            PayoffSource::FrameDependent { model, .. } => model.dim(),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, PayoffSource::Constant { .. })
    }

    pub fn at(&self, r_bar: f64) -> Result<LocalCoefficients> {
        match self {
            PayoffSource::Constant { payoffs, a_diag } => Ok(LocalCoefficients {
                payoffs: payoffs.clone(),
                a_diag: a_diag.clone(),
                connection_diag_im: vec![0.0; payoffs.dim()],
            }),
            PayoffSource::FrameDependent {
                model,
                observable,
                gap_tol,
            } => {
                let frame = eigenframe(&model.hamiltonian(r_bar), r_bar, *gap_tol)?;
                let connection = connection_analytic(&frame, &model.derivative(r_bar), *gap_tol)?;
                let a_ad = adiabatic_matrix(observable, &frame)?;
                let d = frame.dim();
                Ok(LocalCoefficients {
                    payoffs: payoff_matrices(&connection, &a_ad)?,
                    a_diag: (0..d).map(|n| a_ad[(n, n)].re).collect(),
                    connection_diag_im: (0..d).map(|n| connection.get(n, n).im).collect(),
                })
            }
        }
    }
}

/// Reduced trajectory sampled on the integration grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedPath {
    pub taus: Vec<f64>,
    pub states: Vec<SimplexState>,
    /// p̄(T) = (1/T)∫₀ᵀ p dτ, indexed `[sample][level]`.
    pub running_average: Vec<Vec<f64>>,
    /// Payoffs when the source was constant.
    pub constant_payoffs: Option<PayoffMatrices>,
    /// Smallest population seen before clamping.
    pub min_pre_clamp: f64,
    /// Largest |Σp − 1| seen before renormalization.
    pub max_sum_correction: f64,
}

impl ReducedPath {
    pub fn dim(&self) -> usize {
        self.states[0].dim()
    }

    pub fn final_state(&self) -> &SimplexState {
        self.states.last().expect("path is never empty")
    }

    pub fn population(&self, level: usize) -> Vec<f64> {
        self.states.iter().map(|s| s.p[level]).collect()
    }

    pub fn phase(&self, level: usize) -> Vec<f64> {
        self.states.iter().map(|s| s.phi[level]).collect()
    }

    pub fn r_bar(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.r_bar).collect()
    }

    /// S[q | p(τ)] along the path.
    pub fn entropy_series(&self, q: &[f64]) -> Result<Vec<f64>> {
        self.states.iter().map(|s| relative_entropy(q, &s.p)).collect()
    }

    /// Populations linearly interpolated at τ.
    pub fn populations_at(&self, tau: f64) -> Vec<f64> {
        (0..self.dim())
            .map(|l| interp_linear(&self.taus, &self.population(l), tau))
            .collect()
    }
}

fn pack(state: &SimplexState) -> Vec<f64> {
    let mut y = Vec::with_capacity(2 * state.dim() + 1);
    y.extend_from_slice(&state.p);
    y.extend_from_slice(&state.phi);
    y.push(state.r_bar);
    y
}

fn reduced_velocity(source: &PayoffSource, y: &[f64], d: usize) -> Result<Vec<f64>> {
    let p = &y[..d];
    let coeffs = source.at(y[2 * d])?;
    let mut dy = vec![0.0; 2 * d + 1];
    let r_dot: f64 = p.iter().zip(&coeffs.a_diag).map(|(p, a)| p * a).sum();
    let v = replicator(p, &coeffs.payoffs.a);
    for l in 0..d {
        dy[l] = v[l];
        let feedback: f64 = (0..d)
            .filter(|&n| n != l)
            .map(|n| p[n] * coeffs.payoffs.b[(l, n)])
            .sum();
        // i⟨l|l'⟩ = −Im⟨l|l'⟩ for a purely imaginary diagonal
        dy[d + l] = -coeffs.connection_diag_im[l] * r_dot - feedback;
    }
    dy[2 * d] = r_dot;
    Ok(dy)
}

/// Fixed-step RK4 over [0, horizon_tau] with clamping back onto the simplex.
pub fn integrate_reduced(
    initial: &SimplexState,
    source: &PayoffSource,
    horizon_tau: f64,
    step: f64,
) -> Result<ReducedPath> {
    let d = initial.dim();
    ensure_dim(source.dim(), d)?;
    check_simplex(&initial.p, 0.0)?;
    if !(step > 0.0) || !(horizon_tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step and horizon must be positive (step {step}, horizon {horizon_tau})"
        )));
    }
    let n_steps = ((horizon_tau / step) - 1e-9).ceil().max(1.0) as usize;
    let h = horizon_tau / n_steps as f64;

    let mut taus = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    taus.push(0.0);
    states.push(initial.clone());
    let mut y = pack(initial);
    let mut tmp = vec![0.0; y.len()];
    let mut min_pre_clamp = initial.p.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut max_sum_correction: f64 = 0.0;

    for step_index in 1..=n_steps {
        let tau = step_index as f64 * h;
        let k1 = reduced_velocity(source, &y, d)?;
        for i in 0..y.len() {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        let k2 = reduced_velocity(source, &tmp, d)?;
        for i in 0..y.len() {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        let k3 = reduced_velocity(source, &tmp, d)?;
        for i in 0..y.len() {
            tmp[i] = y[i] + h * k3[i];
        }
        let k4 = reduced_velocity(source, &tmp, d)?;
        for i in 0..y.len() {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { t: tau });
        }

        let p = &mut y[..d];
        let min = p.iter().cloned().fold(f64::INFINITY, f64::min);
        min_pre_clamp = min_pre_clamp.min(min);
        if min < -CLAMP_TOL {
            return Err(Error::SimplexViolation {
                tau,
                detail: format!("population {min:e} below clamp tolerance"),
            });
        }
        for v in p.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let sum: f64 = p.iter().sum();
        max_sum_correction = max_sum_correction.max((sum - 1.0).abs());
        if (sum - 1.0).abs() > CLAMP_TOL {
            return Err(Error::SimplexViolation {
                tau,
                detail: format!("populations sum to {sum} before renormalization"),
            });
        }
        for v in p.iter_mut() {
            *v /= sum;
        }

        taus.push(tau);
        states.push(SimplexState {
            p: y[..d].to_vec(),
            phi: y[d..2 * d].to_vec(),
            r_bar: y[2 * d],
        });
    }

    let running_average = running_average(&taus, &states);
    Ok(ReducedPath {
        taus,
        states,
        running_average,
        constant_payoffs: match source {
            PayoffSource::Constant { payoffs, .. } => Some(payoffs.clone()),
            PayoffSource::FrameDependent { .. } => None,
        },
        min_pre_clamp,
        max_sum_correction,
    })
}

fn running_average(taus: &[f64], states: &[SimplexState]) -> Vec<Vec<f64>> {
    let d = states[0].dim();
    let integrals: Vec<Vec<f64>> = (0..d)
        .map(|l| {
            let p: Vec<f64> = states.iter().map(|s| s.p[l]).collect();
            cumulative_trapezoid(taus, &p)
        })
        .collect();
    taus.iter()
        .enumerate()
        .map(|(i, &tau)| {
            if i == 0 {
                states[0].p.clone()
            } else {
                (0..d).map(|l| integrals[l][i] / tau).collect()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeAverage {
    pub mean: Vec<f64>,
    /// max_l |(1/T) ln(p_l(T)/p_l(0)) − Σ_n a_{ln} p̄_n(T)| for constant payoffs.
    pub identity_residual: Option<f64>,
}

/// Trapezoidal mean of p over [0, T].
pub fn time_average_path(path: &ReducedPath, t_end: f64) -> Result<TimeAverage> {
    let last = *path.taus.last().unwrap();
    if !(t_end > 0.0) || t_end > last * (1.0 + 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "T = {t_end} outside the path range (0, {last}]"
        )));
    }
    let d = path.dim();
    let mean: Vec<f64> = (0..d)
        .map(|l| {
            let p = path.population(l);
            let integral = cumulative_trapezoid(&path.taus, &p);
            // integral of the piecewise-linear interpolant up to T
            let hi = path.taus.partition_point(|&v| v < t_end).clamp(1, path.taus.len() - 1);
            let lo = hi - 1;
            let x0 = path.taus[lo];
            let w = (t_end - x0) / (path.taus[hi] - x0);
            let pt = p[lo] * (1.0 - w) + p[hi] * w;
            (integral[lo] + 0.5 * (t_end - x0) * (p[lo] + pt)) / t_end
        })
        .collect();

    let identity_residual = path.constant_payoffs.as_ref().map(|payoffs| {
        let p_end = path.populations_at(t_end);
        let p0 = &path.states[0].p;
        (0..d)
            .filter(|&l| p0[l] > 0.0 && p_end[l] > 0.0)
            .map(|l| {
                let lhs = (p_end[l] / p0[l]).ln() / t_end;
                let rhs: f64 = (0..d).map(|n| payoffs.a[(l, n)] * mean[n]).sum();
                (lhs - rhs).abs()
            })
            .fold(0.0, f64::max)
    });
    Ok(TimeAverage {
        mean,
        identity_residual,
    })
}

/// Max identity residual over every sample T of a constant-payoff path.
pub fn max_identity_residual(path: &ReducedPath) -> Option<f64> {
    let payoffs = path.constant_payoffs.as_ref()?;
    let d = path.dim();
    let p0 = &path.states[0].p;
    let mut worst: f64 = 0.0;
    for (i, &tau) in path.taus.iter().enumerate().skip(1) {
        let p = &path.states[i].p;
        let avg = &path.running_average[i];
        for l in 0..d {
            if p0[l] > 0.0 && p[l] > 0.0 {
                let lhs = (p[l] / p0[l]).ln() / tau;
                let rhs: f64 = (0..d).map(|n| payoffs.a[(l, n)] * avg[n]).sum();
                worst = worst.max((lhs - rhs).abs());
            }
        }
    }
    Some(worst)
}

/// Residual of (1/T)·ln(p_l(T)/p_l(0)) = (1/T)∫₀ᵀ Σ_n a_{ln}(τ)p_n(τ)dτ with the
/// payoffs re-evaluated along the path; reduces to the constant-payoff
/// identity when a does not move.
pub fn path_identity_residual(path: &ReducedPath, source: &PayoffSource) -> Result<f64> {
    let d = path.dim();
    let mut integrands = vec![Vec::with_capacity(path.taus.len()); d];
    for s in &path.states {
        let a = source.at(s.r_bar)?.payoffs.a;
        for l in 0..d {
            integrands[l].push((0..d).map(|n| a[(l, n)] * s.p[n]).sum::<f64>());
        }
    }
    let integrals: Vec<Vec<f64>> = integrands
        .iter()
        .map(|g| cumulative_trapezoid(&path.taus, g))
        .collect();
    let p0 = &path.states[0].p;
    let mut worst: f64 = 0.0;
    for (i, &tau) in path.taus.iter().enumerate().skip(1) {
        let p = &path.states[i].p;
        for l in 0..d {
            if p0[l] > 0.0 && p[l] > 0.0 {
                worst = worst.max(((p[l] / p0[l]).ln() - integrals[l][i]).abs() / tau);
            }
        }
    }
    Ok(worst)
}

/// Σ_l q_l ln(q_l/p_l) with 0·ln 0 = 0.
pub fn relative_entropy(q: &[f64], p: &[f64]) -> Result<f64> {
    ensure_dim(q.len(), p.len())?;
    let mut s = 0.0;
    for (l, (&ql, &pl)) in q.iter().zip(p).enumerate() {
        if ql > 0.0 {
            if !(pl > 0.0) {
                return Err(Error::SupportViolation { index: l });
            }
            s += ql * (ql / pl).ln();
        }
    }
    Ok(s.max(0.0))
}

/// Strictly positive probability vector annihilated by `a`, if any.
pub fn interior_fixed_point(a: &DMatrix<f64>) -> Option<Vec<f64>> {
    let d = a.nrows();
    if d == 0 || a.ncols() != d {
        return None;
    }
    if d == 3 && a[(0, 1)] != 0.0 {
        let raw = [a[(1, 2)] / a[(0, 1)], -a[(0, 2)] / a[(0, 1)], 1.0];
        let sum: f64 = raw.iter().sum();
        let q: Vec<f64> = raw.iter().map(|v| v / sum).collect();
        return if q.iter().all(|&v| v > 0.0) { Some(q) } else { None };
    }
    let basis = null_space(a);
    positive_simplex_point(&basis)
}

/// Orthonormal null-space basis (columns) by singular-value thresholding.
fn null_space(a: &DMatrix<f64>) -> DMatrix<f64> {
    let d = a.nrows();
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let sigma_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cols: Vec<usize> = (0..d)
        .filter(|&i| sigma_max == 0.0 || svd.singular_values[i] < 1e-10 * sigma_max)
        .collect();
    DMatrix::from_fn(d, cols.len(), |r, c| v_t[(cols[c], r)])
}

/// A strictly positive point of {x = N y : x ≥ 0, Σx = 1}, found as the
/// centroid of the polytope's vertices.
fn positive_simplex_point(basis: &DMatrix<f64>) -> Option<Vec<f64>> {
    const TOL: f64 = 1e-12;
    let (d, k) = basis.shape();
    if k == 0 {
        return None;
    }
    if k == 1 {
        let v: Vec<f64> = basis.column(0).iter().cloned().collect();
        let sum: f64 = v.iter().sum();
        if sum.abs() < TOL {
            return None;
        }
        let q: Vec<f64> = v.iter().map(|x| x / sum).collect();
        return if q.iter().all(|&x| x > TOL) { Some(q) } else { None };
    }

    let ones_row: Vec<f64> = (0..k).map(|j| basis.column(j).sum()).collect();
    let mut vertices: Vec<Vec<f64>> = Vec::new();
    for active in combinations(d, k - 1) {
        let mut m = DMatrix::<f64>::zeros(k, k);
        let mut rhs = nalgebra::DVector::<f64>::zeros(k);
        for (row, &i) in active.iter().enumerate() {
            for j in 0..k {
                m[(row, j)] = basis[(i, j)];
            }
        }
        for j in 0..k {
            m[(k - 1, j)] = ones_row[j];
        }
        rhs[k - 1] = 1.0;
        let Some(y) = m.lu().solve(&rhs) else { continue };
        let x = basis * y;
        if x.iter().all(|&v| v.is_finite() && v >= -1e-10) {
            let x: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
            if !vertices
                .iter()
                .any(|w| w.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-9))
            {
                vertices.push(x);
            }
        }
    }
    if vertices.is_empty() {
        return None;
    }
    let mut centroid = vec![0.0; d];
    for v in &vertices {
        for i in 0..d {
            centroid[i] += v[i] / vertices.len() as f64;
        }
    }
    let sum: f64 = centroid.iter().sum();
    let q: Vec<f64> = centroid.iter().map(|x| x / sum).collect();
    if q.iter().all(|&x| x > 1e-10) {
        Some(q)
    } else {
        None
    }
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Long-time behaviour of the replicator flow for constant payoffs.
#[derive(Debug, Clone, PartialEq)]
pub enum Classification {
    /// An interior fixed point exists; S[q|p(τ)] is conserved.
    Conservative { fixed_point: Vec<f64> },
    /// No interior fixed point; p(τ) relaxes to `limit`. `certificate[k]`
    /// holds Σ_n a_{kn}·limit_n (≤ 0 on the initial support), and `extinct`
    /// lists the levels that die out.
    Extinction {
        limit: Vec<f64>,
        certificate: Vec<f64>,
        extinct: Vec<usize>,
    },
}

pub fn classify_longtime(a: &DMatrix<f64>, p0: &[f64]) -> Classification {
    let d = p0.len();
    let support: Vec<usize> = (0..d).filter(|&l| p0[l] > 0.0).collect();
    let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
    let tol = 1e-9 * scale;

    let restricted_fixed_point = |subset: &[usize]| -> Option<Vec<f64>> {
        let sub = DMatrix::from_fn(subset.len(), subset.len(), |i, j| a[(subset[i], subset[j])]);
        let q = interior_fixed_point(&sub)?;
        let mut full = vec![0.0; d];
        for (i, &l) in subset.iter().enumerate() {
            full[l] = q[i];
        }
        Some(full)
    };
    let payoff_against = |x: &[f64]| -> Vec<f64> {
        (0..d).map(|k| (0..d).map(|n| a[(k, n)] * x[n]).sum()).collect()
    };

    if let Some(fixed_point) = restricted_fixed_point(&support) {
        return Classification::Conservative { fixed_point };
    }

    for size in (1..support.len()).rev() {
        for pick in combinations(support.len(), size) {
            let subset: Vec<usize> = pick.iter().map(|&i| support[i]).collect();
            let Some(limit) = restricted_fixed_point(&subset) else { continue };
            let certificate = payoff_against(&limit);
            if support.iter().all(|&k| certificate[k] <= tol) {
                let extinct = support
                    .iter()
                    .copied()
                    .filter(|k| !subset.contains(k))
                    .collect();
                return Classification::Extinction {
                    limit,
                    certificate,
                    extinct,
                };
            }
        }
    }
    // every antisymmetric game has a symmetric equilibrium, so this is only
    // reached for non-antisymmetric input
    Classification::Extinction {
        limit: p0.to_vec(),
        certificate: payoff_against(p0),
        extinct: Vec::new(),
    }
}

/// Closed-form two-level solution: populations and both phases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoLevelSolution {
    pub p1: f64,
    pub phi1: f64,
    pub phi2: f64,
}

/// ln(1 − w + w·eˣ) without overflow or cancellation.
fn log_mix(w: f64, x: f64) -> f64 {
    if w == 0.0 {
        0.0
    } else if x > 0.0 {
        x + ((1.0 - w) * (-x).exp_m1()).ln_1p()
    } else {
        (w * x.exp_m1()).ln_1p()
    }
}

/// p₁(τ) = p₁(0)e^{aτ}/(1 + p₁(0)(e^{aτ} − 1)),
/// φ₁(τ) = (b/a)·ln[p₂(0)(e^{−aτ} − 1) + 1],
/// φ₂(τ) = −(b/a)·ln[p₁(0)(e^{aτ} − 1) + 1],
/// with p₂(0) = 1 − p₁(0), a = a₁₂, b = b₁₂. For a = 0 the limits
/// φ₁ = −b(1 − p₁(0))τ and φ₂ = −b·p₁(0)·τ are used.
pub fn two_level_closed_form(p1_0: f64, a12: f64, b12: f64, tau: f64) -> TwoLevelSolution {
    if a12 == 0.0 {
        return TwoLevelSolution {
            p1: p1_0,
            phi1: -b12 * (1.0 - p1_0) * tau,
            phi2: -b12 * p1_0 * tau,
        };
    }
    let x = a12 * tau;
    let p1 = if p1_0 == 0.0 {
        0.0
    } else {
        p1_0 / (p1_0 + (1.0 - p1_0) * (-x).exp())
    };
    TwoLevelSolution {
        p1,
        phi1: b12 / a12 * log_mix(1.0 - p1_0, -x),
        phi2: -b12 / a12 * log_mix(p1_0, x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rps(a12: f64, a13: f64, a23: f64) -> DMatrix<f64> {
        PayoffMatrices::from_upper_a(3, &[(0, 1, a12), (0, 2, a13), (1, 2, a23)]).a
    }

    fn constant(a: DMatrix<f64>) -> PayoffSource<'static> {
        let d = a.nrows();
        PayoffSource::constant(
            PayoffMatrices {
                a,
                b: DMatrix::zeros(d, d),
            },
            vec![0.0; d],
        )
        .unwrap()
    }

    #[test]
    fn replicator_cases() {
        let a = rps(1.0, -1.0, 1.0);
        let v = replicator_rhs(&[1.0, 0.0, 0.0], &a).unwrap();
        assert_eq!(v, vec![0.0, 0.0, 0.0]);

        let a2 = PayoffMatrices::from_upper_a(2, &[(0, 1, 2.0)]).a;
        let v = replicator_rhs(&[0.5, 0.5], &a2).unwrap();
        assert_eq!(v, vec![0.5, -0.5]);

        let third = 1.0 / 3.0;
        let v = replicator_rhs(&[third; 3], &a).unwrap();
        assert!(v.iter().all(|x| x.abs() < 1e-16));

        assert!(replicator_rhs(&[0.5, 0.5], &a).is_err());
    }

    #[test]
    fn no_feedback_is_stationary() {
        let init = SimplexState::new(vec![0.2, 0.3, 0.5], vec![0.1, -0.2, 0.3], 0.7).unwrap();
        let path = integrate_reduced(&init, &constant(DMatrix::zeros(3, 3)), 2.0, 1e-2).unwrap();
        assert_eq!(path.final_state(), &init);
    }

    #[test]
    fn two_level_logistic_value() {
        let a = PayoffMatrices::from_upper_a(2, &[(0, 1, 2.0)]).a;
        let init = SimplexState::new(vec![0.5, 0.5], vec![0.0, 0.0], 0.0).unwrap();
        let tau = 3f64.ln() / 2.0;
        let path = integrate_reduced(&init, &constant(a), tau, 1e-3).unwrap();
        assert!((path.final_state().p[0] - 0.75).abs() < 1e-8);
        assert!((*path.taus.last().unwrap() - tau).abs() < 1e-15);
    }

    #[test]
    fn symmetric_rps_conserves_entropy() {
        let init = SimplexState::new(vec![0.5, 0.3, 0.2], vec![0.0; 3], 0.0).unwrap();
        let path = integrate_reduced(&init, &constant(rps(1.0, -1.0, 1.0)), 100.0, 1e-3).unwrap();
        let q = [1.0 / 3.0; 3];
        let s = path.entropy_series(&q).unwrap();
        let drift = s.iter().map(|v| (v - s[0]).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-6, "drift {drift}");
        // oscillates rather than settling
        let p0 = path.population(0);
        let (lo, hi) = p0.iter().fold((1.0f64, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        assert!(hi - lo > 0.1);
        assert!(path.min_pre_clamp >= -1e-12);
    }

    #[test]
    fn running_average_is_trapezoidal() {
        let init = SimplexState::new(vec![0.5, 0.3, 0.2], vec![0.0; 3], 0.0).unwrap();
        let path = integrate_reduced(&init, &constant(rps(1.0, -1.0, 1.0)), 10.0, 1e-2).unwrap();
        let i = 537;
        let t = path.taus[i];
        let ta = time_average_path(&path, t).unwrap();
        for l in 0..3 {
            assert!((ta.mean[l] - path.running_average[i][l]).abs() < 1e-9);
        }
        assert!(time_average_path(&path, 11.0).is_err());
        assert!(time_average_path(&path, 0.0).is_err());
    }

    #[test]
    fn constant_path_time_average() {
        let init = SimplexState::new(vec![0.25, 0.75], vec![0.0; 2], 0.0).unwrap();
        let path = integrate_reduced(&init, &constant(DMatrix::zeros(2, 2)), 3.0, 1e-2).unwrap();
        let ta = time_average_path(&path, 2.0).unwrap();
        assert!((ta.mean[0] - 0.25).abs() < 1e-15);
        assert!(ta.identity_residual.unwrap() < 1e-15);
    }

    #[test]
    fn symmetric_rps_time_average() {
        let init = SimplexState::new(vec![0.4, 0.3, 0.3], vec![0.0; 3], 0.0).unwrap();
        let path = integrate_reduced(&init, &constant(rps(1.0, -1.0, 1.0)), 100.0, 1e-3).unwrap();
        let ta = time_average_path(&path, 100.0).unwrap();
        let q = interior_fixed_point(&rps(1.0, -1.0, 1.0)).unwrap();
        for l in 0..3 {
            assert!((ta.mean[l] - q[l]).abs() < 1e-3, "{:?}", ta.mean);
        }
        assert!(ta.identity_residual.unwrap() < 1e-6);
        assert!(max_identity_residual(&path).unwrap() < 1e-6);
    }

    #[test]
    fn interior_fixed_point_cases() {
        let q = interior_fixed_point(&rps(1.0, -1.0, 1.0)).unwrap();
        for v in q {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let q = interior_fixed_point(&rps(2.0, -1.0, 1.0)).unwrap();
        assert_eq!(q, vec![0.25, 0.25, 0.5]);
        assert!(interior_fixed_point(&rps(1.0, 2.0, 1.0)).is_none());
    }

    #[test]
    fn general_null_space_search() {
        // 4 levels: a nonsingular antisymmetric matrix has no null space
        let a = PayoffMatrices::from_upper_a(4, &[(0, 1, 1.0), (2, 3, 1.0)]).a;
        assert!(interior_fixed_point(&a).is_none());

        // d = 5 cyclic game: each level beats the next two
        let mut upper = Vec::new();
        for l in 0..5 {
            for s in 1..=2 {
                let n = (l + s) % 5;
                let v = if l < n { 1.0 } else { -1.0 };
                upper.push((l.min(n), l.max(n), v));
            }
        }
        let a = PayoffMatrices::from_upper_a(5, &upper).a;
        let q = interior_fixed_point(&a).unwrap();
        for v in &q {
            assert!((v - 0.2).abs() < 1e-10);
        }

        // zero game: two-dimensional null space and beyond
        let q = interior_fixed_point(&DMatrix::zeros(4, 4)).unwrap();
        for v in &q {
            assert!((v - 0.25).abs() < 1e-10);
        }

        // d = 3 with a12 = 0 falls through to the general search
        assert!(interior_fixed_point(&rps(0.0, 1.0, -1.0)).is_none());
        let q = interior_fixed_point(&DMatrix::zeros(3, 3)).unwrap();
        assert!(q.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-10));
    }

    #[test]
    fn relative_entropy_cases() {
        assert_eq!(relative_entropy(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let s = relative_entropy(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((s - expected).abs() < 1e-15);
        assert!((s - 0.14384).abs() < 1e-5);
        assert!(matches!(
            relative_entropy(&[1.0, 0.0], &[0.0, 1.0]),
            Err(Error::SupportViolation { index: 0 })
        ));
        assert_eq!(relative_entropy(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 2f64.ln());
    }

    #[test]
    fn classification_cases() {
        let third = 1.0 / 3.0;
        match classify_longtime(&rps(1.0, -1.0, 1.0), &[0.5, 0.3, 0.2]) {
            Classification::Conservative { fixed_point } => {
                assert!(fixed_point.iter().all(|v| (v - third).abs() < 1e-15))
            }
            other => panic!("{other:?}"),
        }
        match classify_longtime(&rps(1.0, 2.0, 1.0), &[0.3, 0.3, 0.4]) {
            Classification::Extinction {
                limit,
                certificate,
                extinct,
            } => {
                assert_eq!(limit, vec![1.0, 0.0, 0.0]);
                assert!(certificate.iter().all(|&c| c <= 0.0));
                assert_eq!(extinct, vec![1, 2]);
            }
            other => panic!("{other:?}"),
        }
        let a2 = PayoffMatrices::from_upper_a(2, &[(0, 1, -3.0)]).a;
        match classify_longtime(&a2, &[0.5, 0.5]) {
            Classification::Extinction { limit, extinct, .. } => {
                assert_eq!(limit, vec![0.0, 1.0]);
                assert_eq!(extinct, vec![0]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn classification_respects_initial_support() {
        // on the face p3 = 0 the symmetric RPS game reduces to 1 beats 2
        match classify_longtime(&rps(1.0, -1.0, 1.0), &[0.5, 0.5, 0.0]) {
            Classification::Extinction { limit, .. } => assert_eq!(limit, vec![1.0, 0.0, 0.0]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn extinction_entropy_decays() {
        let a = rps(1.0, 2.0, 1.0);
        let init = SimplexState::new(vec![0.2, 0.4, 0.4], vec![0.0; 3], 0.0).unwrap();
        let path = integrate_reduced(&init, &constant(a), 30.0, 1e-3).unwrap();
        let s = path.entropy_series(&[1.0, 0.0, 0.0]).unwrap();
        assert!(s.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        assert!(*s.last().unwrap() < 1e-3);
    }

    #[test]
    fn vertex_is_stationary() {
        let init = SimplexState::new(vec![0.0, 1.0, 0.0], vec![0.0; 3], 0.0).unwrap();
        let path = integrate_reduced(&init, &constant(rps(2.0, -1.0, 1.0)), 10.0, 1e-2).unwrap();
        assert!(path.states.iter().all(|s| s.p == vec![0.0, 1.0, 0.0]));
    }

    #[test]
    fn closed_form_cases() {
        let s = two_level_closed_form(0.3, 0.0, 0.0, 5.0);
        assert_eq!((s.p1, s.phi1, s.phi2), (0.3, 0.0, 0.0));
        let s = two_level_closed_form(0.5, 2.0, 0.0, 3f64.ln() / 2.0);
        assert!((s.p1 - 0.75).abs() < 1e-15);
        let s = two_level_closed_form(0.5, 2.0, 0.0, 50.0);
        assert!((s.p1 - 1.0).abs() < 1e-15);
        let s = two_level_closed_form(0.5, -2.0, 1.0, 500.0);
        assert!(s.p1 < 1e-300 && s.phi1.is_finite() && s.phi2.is_finite());
        // small-a limit
        let s = two_level_closed_form(0.3, 1e-9, 0.5, 2.0);
        assert!((s.phi1 + 0.5 * 0.7 * 2.0).abs() < 1e-8);
        assert!((s.phi2 + 0.5 * 0.3 * 2.0).abs() < 1e-8);
    }

    #[test]
    fn reduced_phases_match_closed_form_off_center() {
        // p1(0) ≠ 1/2 distinguishes which initial population enters each phase
        let mut m = PayoffMatrices::from_upper_a(2, &[(0, 1, 1.3)]);
        m.b[(0, 1)] = 0.4;
        m.b[(1, 0)] = 0.4;
        let source = PayoffSource::constant(m, vec![0.0, 0.0]).unwrap();
        let init = SimplexState::new(vec![0.2, 0.8], vec![0.0; 2], 0.0).unwrap();
        let path = integrate_reduced(&init, &source, 4.0, 1e-3).unwrap();
        for (i, &tau) in path.taus.iter().enumerate().step_by(250) {
            let cf = two_level_closed_form(0.2, 1.3, 0.4, tau);
            let s = &path.states[i];
            assert!((s.p[0] - cf.p1).abs() < 1e-10);
            assert!((s.phi[0] - cf.phi1).abs() < 1e-10);
            assert!((s.phi[1] - cf.phi2).abs() < 1e-10);
        }
    }

    #[test]
    fn phases_follow_running_average() {
        let mut m = PayoffMatrices::from_upper_a(3, &[(0, 1, 2.0), (0, 2, -1.0), (1, 2, 1.0)]);
        for &(l, n, v) in &[(0, 1, 0.3), (0, 2, -0.2), (1, 2, 0.5)] {
            m.b[(l, n)] = v;
            m.b[(n, l)] = v;
        }
        let b = m.b.clone();
        let source = PayoffSource::constant(m, vec![0.0; 3]).unwrap();
        let init = SimplexState::new(vec![0.3, 0.25, 0.45], vec![0.0; 3], 0.0).unwrap();
        let path = integrate_reduced(&init, &source, 20.0, 1e-3).unwrap();
        for (i, &tau) in path.taus.iter().enumerate().skip(1).step_by(997) {
            for l in 0..3 {
                let predicted: f64 = -tau
                    * (0..3)
                        .filter(|&n| n != l)
                        .map(|n| path.running_average[i][n] * b[(l, n)])
                        .sum::<f64>();
                assert!((path.states[i].phi[l] - predicted).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn invalid_initial_state() {
        assert!(SimplexState::new(vec![0.5, 0.6], vec![0.0; 2], 0.0).is_err());
        assert!(SimplexState::new(vec![1.2, -0.2], vec![0.0; 2], 0.0).is_err());
        assert!(SimplexState::new(vec![1.0], vec![0.0; 2], 0.0).is_err());
    }
}
