//! Small dense complex helpers shared by the dynamics modules.

use nalgebra::DVector;


use crate::error::{Error, Result};

pub use nalgebra::DMatrix;
pub use num_complex::Complex64;

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

pub const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub const ONE: Complex64 = Complex64::new(1.0, 0.0);
pub const I: Complex64 = Complex64::new(0.0, 1.0);

/// Largest element of |M - Mᴴ|.
pub fn hermitian_deviation(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut dev = 0.0_f64;
    for i in 0..n {
        for j in i..n {
            dev = dev.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    dev
}

/// Largest element of |M + Mᴴ|.
pub fn anti_hermitian_deviation(m: &CMatrix) -> f64 {
    let n = m.nrows();
    let mut dev = 0.0_f64;
    for i in 0..n {
        for j in i..n {
            dev = dev.max((m[(i, j)] + m[(j, i)].conj()).norm());
        }
    }
    dev
}

pub fn ensure_square(m: &CMatrix, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidArgument(format!(
            "{what} must be square, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(m.nrows())
}

pub fn ensure_hermitian(m: &CMatrix, what: &str, tol: f64) -> Result<()> {
    ensure_square(m, what)?;
    let deviation = hermitian_deviation(m);
    if deviation > tol || !deviation.is_finite() {
        return Err(Error::NotHermitian {
            what: what.to_string(),
            deviation,
        });
    }
    Ok(())
}

pub fn ensure_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Max element-wise modulus of a complex matrix.
pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

/// Builds a complex matrix from real entries.
pub fn real_matrix(rows: usize, cols: usize, entries: &[f64]) -> CMatrix {
    CMatrix::from_row_iterator(rows, cols, entries.iter().map(|&x| Complex64::new(x, 0.0)))
}

pub fn pauli_x() -> CMatrix {
    real_matrix(2, 2, &[0.0, 1.0, 1.0, 0.0])
}

pub fn pauli_y() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[ZERO, -I, I, ZERO])
}

pub fn pauli_z() -> CMatrix {
    real_matrix(2, 2, &[1.0, 0.0, 0.0, -1.0])
}

/// Wraps an angle into (-π, π].
pub fn wrap_angle(x: f64) -> f64 {
    use std::f64::consts::PI;
    let mut y = x % (2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    } else if y <= -PI {
        y += 2.0 * PI;
    }
    y
}

/// Cumulative trapezoidal integral of `values` over the grid `xs`, starting at 0.
pub fn cumulative_trapezoid(xs: &[f64], values: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        if i > 0 {
            acc += 0.5 * (xs[i] - xs[i - 1]) * (values[i] + values[i - 1]);
        }
        out.push(acc);
    }
    out
}

/// Piecewise-linear interpolation on an increasing grid; clamps outside the range.
pub fn interp_linear(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let hi = xs.partition_point(|&v| v < x);
    let lo = hi - 1;
    let w = (x - xs[lo]) / (xs[hi] - xs[lo]);
    ys[lo] * (1.0 - w) + ys[hi] * w
}
