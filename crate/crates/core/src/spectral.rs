//! Adiabatic eigenframes, gauge fixing, the connection ⟨l|∂_R n⟩ and the
//! payoff matrices of the reduced game.
//!
//! Frames are produced in a deterministic raw gauge (largest-magnitude
//! component of each eigenvector real and positive) and can then be
//! transported along a path with [`gauge_align`]. The analytic connection
//! uses the parallel-transport convention, so its diagonal is zero.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{
    anti_hermitian_deviation, ensure_dim, ensure_hermitian, ensure_square, CMatrix, CVector,
    ZERO,
};

pub const DEFAULT_GAP_TOL: f64 = 1e-8;
pub const HERMITIAN_TOL: f64 = 1e-12;
pub const CONNECTION_TOL: f64 = 1e-9;

/// Relative tolerance under which two component magnitudes count as tied
/// when choosing the raw-gauge pivot.
const PIVOT_TIE_TOL: f64 = 1e-10;

/// A one-parameter family of Hermitian matrices H[R] together with ∂_R H.
pub trait HamiltonianModel: Send + Sync {
    fn dim(&self) -> usize;

    fn hamiltonian(&self, r: f64) -> CMatrix;

    fn derivative(&self, r: f64) -> CMatrix;

    /// Writes H[R]·ψ into `out`. Models override this to avoid allocating.
    fn apply(&self, r: f64, psi: &[Complex64], out: &mut [Complex64]) {
        let h = self.hamiltonian(r);
        let d = self.dim();
        for i in 0..d {
            let mut acc = ZERO;
            for j in 0..d {
                acc += h[(i, j)] * psi[j];
            }
            out[i] = acc;
        }
    }
}

/// Checks Hermiticity of H and ∂_R H at the sample points and compares the
/// analytic derivative with a central difference of step 1e-5.
pub fn validate_model(model: &dyn HamiltonianModel, samples: &[f64]) -> Result<()> {
    const FD_STEP: f64 = 1e-5;
    const FD_REL_TOL: f64 = 1e-6;
    for &r in samples {
        let h = model.hamiltonian(r);
        ensure_dim(model.dim(), ensure_square(&h, "hamiltonian")?)?;
        ensure_hermitian(&h, "hamiltonian", HERMITIAN_TOL)?;
        let dh = model.derivative(r);
        ensure_dim(model.dim(), ensure_square(&dh, "derivative")?)?;
        ensure_hermitian(&dh, "derivative", HERMITIAN_TOL)?;

        let fd = (model.hamiltonian(r + FD_STEP) - model.hamiltonian(r - FD_STEP))
            / Complex64::new(2.0 * FD_STEP, 0.0);
        let scale = dh.iter().fold(1.0_f64, |acc, z| acc.max(z.norm()));
        let err = (fd - &dh).iter().fold(0.0_f64, |acc, z| acc.max(z.norm()));
        if err > FD_REL_TOL * scale {
            return Err(Error::Value(format!(
                "derivative does not match finite difference of hamiltonian at R = {r} (error {err:e})"
            )));
        }
    }
    Ok(())
}

/// Eigenvalues and eigenvectors of H at a single R, ascending, in a fixed gauge.
#[derive(Debug, Clone, PartialEq)]
pub struct AdiabaticFrame {
    pub r_value: f64,
    pub energies: Vec<f64>,
    /// Columns are the normalized eigenvectors |n[R]⟩.
    pub vectors: CMatrix,
    pub min_gap: f64,
}

impl AdiabaticFrame {
    pub fn dim(&self) -> usize {
        self.energies.len()
    }

    pub fn vector(&self, n: usize) -> CVector {
        self.vectors.column(n).into_owned()
    }

    /// Components ⟨n|ψ⟩ of a lab-basis state.
    pub fn project(&self, psi: &CVector) -> CVector {
        self.vectors.adjoint() * psi
    }

    /// Multiplies each column by its own unit phase e^{iα_n}.
    pub fn regauge(&self, alphas: &[f64]) -> AdiabaticFrame {
        let mut out = self.clone();
        for (n, &alpha) in alphas.iter().enumerate() {
            let phase = Complex64::from_polar(1.0, alpha);
            for i in 0..self.dim() {
                out.vectors[(i, n)] *= phase;
            }
        }
        out
    }
}

/// Makes the largest-magnitude component of every column real and positive
/// (lowest index wins near-ties).
pub fn apply_raw_gauge(vectors: &mut CMatrix) {
    for n in 0..vectors.ncols() {
        let max = (0..vectors.nrows())
            .map(|i| vectors[(i, n)].norm())
            .fold(0.0_f64, f64::max);
        if max == 0.0 {
            continue;
        }
        let pivot = (0..vectors.nrows())
            .find(|&i| vectors[(i, n)].norm() >= max * (1.0 - PIVOT_TIE_TOL))
            .unwrap_or(0);
        let z = vectors[(pivot, n)];
        let phase = z.conj() / z.norm();
        for i in 0..vectors.nrows() {
            vectors[(i, n)] *= phase;
        }
    }
}

pub fn eigenframe(h: &CMatrix, r_value: f64, gap_tol: f64) -> Result<AdiabaticFrame> {
    if !(gap_tol > 0.0) {
        return Err(Error::InvalidArgument(format!("gap_tol must be positive, got {gap_tol}")));
    }
    let d = ensure_square(h, "hamiltonian")?;
    if d < 2 {
        return Err(Error::InvalidArgument("dimension must be at least 2".into()));
    }
    let scale = h.iter().fold(1.0_f64, |acc, z| acc.max(z.norm()));
    ensure_hermitian(h, "hamiltonian", HERMITIAN_TOL * scale)?;

    let eig = SymmetricEigen::new(h.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));

    let energies: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = CMatrix::zeros(d, d);
    for (col, &src) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(src);
        let norm = v.norm();
        for i in 0..d {
            vectors[(i, col)] = v[i] / norm;
        }
    }
    apply_raw_gauge(&mut vectors);

    let mut min_gap = f64::INFINITY;
    for n in 0..d - 1 {
        let gap = energies[n + 1] - energies[n];
        if gap <= gap_tol {
            return Err(Error::DegenerateSpectrum {
                lower: n,
                upper: n + 1,
                gap,
                gap_tol,
            });
        }
        min_gap = min_gap.min(gap);
    }

    Ok(AdiabaticFrame {
        r_value,
        energies,
        vectors,
        min_gap,
    })
}

/// Rephases each column of `target` so that ⟨n_ref|n_tgt⟩ is real and positive.
pub fn gauge_align(reference: &AdiabaticFrame, target: &AdiabaticFrame) -> Result<AdiabaticFrame> {
    ensure_dim(reference.dim(), target.dim())?;
    let d = target.dim();
    let mut out = target.clone();
    for n in 0..d {
        let overlap = reference.vectors.column(n).dotc(&target.vectors.column(n));
        let magnitude = overlap.norm();
        if magnitude < 0.5 {
            return Err(Error::FrameMismatch {
                column: n,
                overlap: magnitude,
            });
        }
        let phase = overlap.conj() / magnitude;
        for i in 0..d {
            out.vectors[(i, n)] *= phase;
        }
    }
    Ok(out)
}

/// Entries ⟨l|∂_R n⟩ of the eigenframe derivative; anti-Hermitian.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectionMatrix {
    entries: CMatrix,
}

impl ConnectionMatrix {
    pub fn new(entries: CMatrix) -> Result<Self> {
        ensure_square(&entries, "connection")?;
        let deviation = anti_hermitian_deviation(&entries);
        if deviation > CONNECTION_TOL || !deviation.is_finite() {
            return Err(Error::NotAntiHermitian {
                what: "connection".into(),
                deviation,
            });
        }
        Ok(ConnectionMatrix { entries })
    }

    /// Builds a connection from its strict upper triangle, filling the lower
    /// triangle by anti-Hermiticity and leaving the diagonal at zero.
    pub fn from_upper(d: usize, upper: impl Fn(usize, usize) -> Complex64) -> Self {
        let mut entries = CMatrix::zeros(d, d);
        for l in 0..d {
            for n in l + 1..d {
                let z = upper(l, n);
                entries[(l, n)] = z;
                entries[(n, l)] = -z.conj();
            }
        }
        ConnectionMatrix { entries }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &CMatrix {
        &self.entries
    }

    pub fn get(&self, l: usize, n: usize) -> Complex64 {
        self.entries[(l, n)]
    }

    pub fn anti_hermitian_residual(&self) -> f64 {
        anti_hermitian_deviation(&self.entries)
    }

    /// Same connection with the diagonal replaced by i·θ_l, i.e. the gauge
    /// term a rephasing e^{iα_l(R)} with ∂_R α_l = θ_l would produce.
    pub fn with_diagonal(&self, theta: &[f64]) -> Self {
        let mut entries = self.entries.clone();
        for (l, &t) in theta.iter().enumerate() {
            entries[(l, l)] = Complex64::new(0.0, t);
        }
        ConnectionMatrix { entries }
    }
}

/// Off-diagonal ⟨l|n'⟩ = ⟨l|∂_R H|n⟩/(E_n − E_l); diagonal zero.
pub fn connection_analytic(
    frame: &AdiabaticFrame,
    dh: &CMatrix,
    gap_tol: f64,
) -> Result<ConnectionMatrix> {
    let d = frame.dim();
    ensure_dim(d, ensure_square(dh, "derivative")?)?;
    let scale = dh.iter().fold(1.0_f64, |acc, z| acc.max(z.norm()));
    ensure_hermitian(dh, "derivative", HERMITIAN_TOL * scale)?;
    let dh_ad = frame.vectors.adjoint() * dh * &frame.vectors;
    let mut entries = CMatrix::zeros(d, d);
    for l in 0..d {
        for n in 0..d {
            if l == n {
                continue;
            }
            let gap = frame.energies[n] - frame.energies[l];
            if gap.abs() < gap_tol {
                return Err(Error::DegenerateSpectrum {
                    lower: l.min(n),
                    upper: l.max(n),
                    gap: gap.abs(),
                    gap_tol,
                });
            }
            entries[(l, n)] = dh_ad[(l, n)] / gap;
        }
    }
    ConnectionMatrix::new(entries)
}

/// Central-difference connection with both side frames aligned to the central one.
///
/// The overlaps W± = U₀ᴴU± are unitary, so each is mapped through the Cayley
/// transform 2(W − 1)(W + 1)⁻¹ (anti-Hermitian for unitary W, equal to log W
/// up to third order) before differencing. The plain difference U₀ᴴ(U₊ − U₋)/h
/// carries an O(h²) Hermitian part that would trip the anti-Hermiticity check.
pub fn connection_fd(
    model: &dyn HamiltonianModel,
    r_value: f64,
    step: f64,
    gap_tol: f64,
) -> Result<ConnectionMatrix> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {step}")));
    }
    let center = eigenframe(&model.hamiltonian(r_value), r_value, gap_tol)?;
    let plus = eigenframe(&model.hamiltonian(r_value + 0.5 * step), r_value + 0.5 * step, gap_tol)?;
    let minus = eigenframe(&model.hamiltonian(r_value - 0.5 * step), r_value - 0.5 * step, gap_tol)?;
    let plus = gauge_align(&center, &plus)?;
    let minus = gauge_align(&center, &minus)?;
    let log_plus = cayley(&(center.vectors.adjoint() * &plus.vectors))?;
    let log_minus = cayley(&(center.vectors.adjoint() * &minus.vectors))?;
    ConnectionMatrix::new((log_plus - log_minus) / Complex64::new(step, 0.0))
}

fn cayley(w: &CMatrix) -> Result<CMatrix> {
    let d = w.nrows();
    let id = CMatrix::identity(d, d);
    let inv = (w + &id).try_inverse().ok_or_else(|| {
        Error::InvalidArgument("frame overlap has eigenvalue -1; finite-difference step too large".into())
    })?;
    Ok((w - id) * inv * Complex64::new(2.0, 0.0))
}

/// Berry term i⟨l|∂_R l⟩ in the raw gauge, by central difference of raw
/// frames (no alignment). Real-valued for smooth raw gauges.
pub fn berry_term_raw_fd(
    model: &dyn HamiltonianModel,
    r_value: f64,
    step: f64,
    gap_tol: f64,
) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {step}")));
    }
    let center = eigenframe(&model.hamiltonian(r_value), r_value, gap_tol)?;
    let plus = eigenframe(&model.hamiltonian(r_value + 0.5 * step), r_value + 0.5 * step, gap_tol)?;
    let minus = eigenframe(&model.hamiltonian(r_value - 0.5 * step), r_value - 0.5 * step, gap_tol)?;
    Ok((0..center.dim())
        .map(|l| {
            let diff = (plus.vectors.column(l) - minus.vectors.column(l)) / Complex64::new(step, 0.0);
            let z = center.vectors.column(l).dotc(&diff);
            -z.im
        })
        .collect())
}

/// Uᴴ·A·U with U the frame's eigenvectors: A_{nm} = ⟨n|A|m⟩.
pub fn adiabatic_matrix(a_lab: &CMatrix, frame: &AdiabaticFrame) -> Result<CMatrix> {
    ensure_dim(frame.dim(), ensure_square(a_lab, "observable")?)?;
    let mut out = frame.vectors.adjoint() * a_lab * &frame.vectors;
    // Uᴴ A U is Hermitian up to rounding; symmetrize so downstream checks see it exactly.
    let d = out.nrows();
    for i in 0..d {
        out[(i, i)] = Complex64::new(out[(i, i)].re, 0.0);
        for j in i + 1..d {
            let z = 0.5 * (out[(i, j)] + out[(j, i)].conj());
            out[(i, j)] = z;
            out[(j, i)] = z.conj();
        }
    }
    Ok(out)
}

/// Replicator payoffs a (antisymmetric) and feedback-phase couplings b (symmetric).
#[derive(Debug, Clone, PartialEq)]
pub struct PayoffMatrices {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl PayoffMatrices {
    pub fn zeros(d: usize) -> Self {
        PayoffMatrices {
            a: DMatrix::zeros(d, d),
            b: DMatrix::zeros(d, d),
        }
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Antisymmetric a from its upper triangle, b = 0.
    pub fn from_upper_a(d: usize, upper: &[(usize, usize, f64)]) -> Self {
        let mut m = PayoffMatrices::zeros(d);
        for &(l, n, v) in upper {
            m.a[(l, n)] = v;
            m.a[(n, l)] = -v;
        }
        m
    }
}

/// a_{ln} = −2 Re(⟨l|n'⟩ A_{nl}), b_{ln} = Im(⟨l|n'⟩ A_{nl}); upper triangle
/// computed, lower mirrored (a with sign), diagonals zero.
pub fn payoff_matrices(connection: &ConnectionMatrix, a_ad: &CMatrix) -> Result<PayoffMatrices> {
    let d = connection.dim();
    ensure_dim(d, ensure_square(a_ad, "observable")?)?;
    let mut out = PayoffMatrices::zeros(d);
    for l in 0..d {
        for n in l + 1..d {
            let z = connection.get(l, n) * a_ad[(n, l)];
            let a = -2.0 * z.re;
            out.a[(l, n)] = a;
            out.a[(n, l)] = -a;
            out.b[(l, n)] = z.im;
            out.b[(n, l)] = z.im;
        }
    }
    Ok(out)
}
