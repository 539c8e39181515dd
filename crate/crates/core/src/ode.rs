//! Dormand–Prince 5(4) embedded Runge–Kutta pair with PI step control.
//!
//! The solver advances a flat `f64` state and stops exactly on a caller
//! supplied grid of output times, so no interpolation is involved in the
//! recorded samples.

use crate::error::{Error, Result};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

// difference between the 5th and 4th order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Settings for the adaptive integrator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorOptions {
    pub rtol: f64,
    pub atol: f64,
    pub min_step: f64,
    pub max_step: f64,
    pub initial_step: f64,
    /// Spacing of recorded samples, in the integrator's own time unit.
    pub sample_stride: f64,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        IntegratorOptions {
            rtol: 1e-9,
            atol: 1e-12,
            min_step: 1e-12,
            max_step: f64::INFINITY,
            initial_step: 1e-3,
            sample_stride: 0.125,
        }
    }
}

impl IntegratorOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rtol > 0.0
            && self.atol >= 0.0
            && self.min_step > 0.0
            && self.max_step > self.min_step
            && self.initial_step > 0.0
            && self.sample_stride > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid integrator options {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

/// Right-hand side y' = f(t, y).
pub trait OdeSystem {
    fn rhs(&mut self, t: f64, y: &[f64], dydt: &mut [f64]);
}

impl<F: FnMut(f64, &[f64], &mut [f64])> OdeSystem for F {
    fn rhs(&mut self, t: f64, y: &[f64], dydt: &mut [f64]) {
        self(t, y, dydt)
    }
}

/// Integrates from `times[0]` through every entry of `times`, invoking
/// `record(t, y)` at each (including the first).
pub fn integrate_dopri5<S: OdeSystem>(
    system: &mut S,
    y0: &[f64],
    times: &[f64],
    opts: &IntegratorOptions,
    mut record: impl FnMut(f64, &[f64]),
) -> Result<StepStats> {
    opts.validate()?;
    if times.is_empty() {
        return Ok(StepStats::default());
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("output times must be strictly increasing".into()));
    }
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut k: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut stats = StepStats::default();

    let mut t = times[0];
    record(t, &y);
    system.rhs(t, &y, &mut k[0]);
    stats.evaluations += 1;

    let mut h = opts.initial_step.min(opts.max_step);
    let mut err_prev: f64 = 1e-4;

    // Hairer's PI constants for DOPRI5
    const BETA: f64 = 0.04;
    const EXPO: f64 = 0.2 - BETA * 0.75;
    const SAFETY: f64 = 0.9;

    for &t_target in &times[1..] {
        while t < t_target {
            let remaining = t_target - t;
            let last = h >= remaining * (1.0 - 1e-12);
            let step = if last { remaining } else { h };

            stage(&mut tmp, &y, step, &[(A21, &k[0])]);
            system.rhs(t + C2 * step, &tmp, &mut k[1]);
            stage(&mut tmp, &y, step, &[(A31, &k[0]), (A32, &k[1])]);
            system.rhs(t + C3 * step, &tmp, &mut k[2]);
            stage(&mut tmp, &y, step, &[(A41, &k[0]), (A42, &k[1]), (A43, &k[2])]);
            system.rhs(t + C4 * step, &tmp, &mut k[3]);
            stage(
                &mut tmp,
                &y,
                step,
                &[(A51, &k[0]), (A52, &k[1]), (A53, &k[2]), (A54, &k[3])],
            );
            system.rhs(t + C5 * step, &tmp, &mut k[4]);
            stage(
                &mut tmp,
                &y,
                step,
                &[(A61, &k[0]), (A62, &k[1]), (A63, &k[2]), (A64, &k[3]), (A65, &k[4])],
            );
            system.rhs(t + step, &tmp, &mut k[5]);
            stage(
                &mut y_new,
                &y,
                step,
                &[(A71, &k[0]), (A73, &k[2]), (A74, &k[3]), (A75, &k[4]), (A76, &k[5])],
            );
            system.rhs(t + step, &y_new, &mut k[6]);
            stats.evaluations += 6;

            let mut err_sq = 0.0;
            for i in 0..n {
                let e = step
                    * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i]
                        + E7 * k[6][i]);
                let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
                err_sq += (e / sc) * (e / sc);
            }
            let err = (err_sq / n as f64).sqrt();
            if !err.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteState { t });
            }

            if err <= 1.0 {
                let fac = (err.max(1e-10).powf(EXPO) / err_prev.powf(BETA)) / SAFETY;
                let fac = fac.clamp(0.2, 10.0);
                err_prev = err.max(1e-4);
                t = if last { t_target } else { t + step };
                std::mem::swap(&mut y, &mut y_new);
                k.swap(0, 6);
                stats.accepted += 1;
                let proposal = step / fac;
                // a short final step toward a sample must not shrink the running step
                h = if last { h.max(proposal) } else { proposal };
                h = h.min(opts.max_step);
            } else {
                let fac = (err.powf(EXPO) / SAFETY).min(10.0);
                h = step / fac;
                stats.rejected += 1;
                if h < opts.min_step {
                    return Err(Error::StepSizeUnderflow { t, step: h });
                }
            }
        }
        record(t, &y);
    }
    Ok(stats)
}

fn stage(out: &mut [f64], y: &[f64], h: f64, terms: &[(f64, &Vec<f64>)]) {
    for i in 0..y.len() {
        let mut acc = 0.0;
        for (coef, k) in terms {
            acc += coef * k[i];
        }
        out[i] = y[i] + h * acc;
    }
}

/// One classical fourth-order Runge–Kutta step of size `h`.
pub fn rk4_step<F>(f: &mut F, t: f64, y: &[f64], h: f64, out: &mut [f64])
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    f(t, y, &mut k1);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    f(t + 0.5 * h, &tmp, &mut k2);
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    f(t + 0.5 * h, &tmp, &mut k3);
    for i in 0..n {
        tmp[i] = y[i] + h * k3[i];
    }
    f(t + h, &tmp, &mut k4);
    for i in 0..n {
        out[i] = y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Output grid `start, start + stride, …` ending exactly at `end`.
pub fn sample_grid(start: f64, end: f64, stride: f64) -> Vec<f64> {
    let count = ((end - start) / stride).floor() as usize;
    let mut grid: Vec<f64> = (0..=count).map(|i| start + i as f64 * stride).collect();
    let last = *grid.last().unwrap();
    if end - last > 1e-9 * stride {
        grid.push(end);
    } else if let Some(g) = grid.last_mut() {
        *g = end;
    }
    if grid.len() == 1 && end > start {
        grid.push(end);
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay() {
        let mut f = |_t: f64, y: &[f64], dy: &mut [f64]| dy[0] = -y[0];
        let times = sample_grid(0.0, 5.0, 0.5);
        let mut last = 0.0;
        integrate_dopri5(&mut f, &[1.0], &times, &IntegratorOptions::default(), |_, y| last = y[0])
            .unwrap();
        assert!((last - (-5.0f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn harmonic_oscillator_period() {
        let mut f = |_t: f64, y: &[f64], dy: &mut [f64]| {
            dy[0] = y[1];
            dy[1] = -y[0];
        };
        let period = 2.0 * std::f64::consts::PI;
        let times = sample_grid(0.0, 10.0 * period, 0.5);
        let mut last = vec![];
        let opts = IntegratorOptions::default();
        let stats = integrate_dopri5(&mut f, &[1.0, 0.0], &times, &opts, |_, y| last = y.to_vec())
            .unwrap();
        assert!((last[0] - 1.0).abs() < 1e-7);
        assert!(last[1].abs() < 1e-7);
        assert!(stats.accepted > 0);
    }

    #[test]
    fn records_every_grid_point() {
        let mut f = |_t: f64, _y: &[f64], dy: &mut [f64]| dy[0] = 1.0;
        let times = sample_grid(0.0, 1.0, 0.3);
        assert_eq!(times, vec![0.0, 0.3, 0.6, 0.8999999999999999, 1.0]);
        let mut seen = vec![];
        integrate_dopri5(&mut f, &[0.0], &times, &IntegratorOptions::default(), |t, y| {
            seen.push((t, y[0]))
        })
        .unwrap();
        assert_eq!(seen.len(), times.len());
        for (t, y) in seen {
            assert!((t - y).abs() < 1e-12);
        }
    }

    #[test]
    fn underflow_reported() {
        // finite-time blow-up y' = y², y(0) = 1 at t = 1
        let mut f = |_t: f64, y: &[f64], dy: &mut [f64]| dy[0] = y[0] * y[0];
        let opts = IntegratorOptions {
            min_step: 1e-6,
            ..Default::default()
        };
        let err = integrate_dopri5(&mut f, &[1.0], &[0.0, 2.0], &opts, |_, _| {}).unwrap_err();
        assert!(matches!(
            err,
            Error::StepSizeUnderflow { .. } | Error::NonFiniteState { .. }
        ));
    }

    #[test]
    fn rk4_is_fourth_order() {
        let mut f = |_t: f64, y: &[f64], dy: &mut [f64]| dy[0] = y[0];
        let run = |h: f64, f: &mut dyn FnMut(f64, &[f64], &mut [f64])| {
            let mut y = vec![1.0];
            let mut out = vec![0.0];
            let steps = (1.0 / h).round() as usize;
            for i in 0..steps {
                let mut g = |t: f64, y: &[f64], dy: &mut [f64]| f(t, y, dy);
                rk4_step(&mut g, i as f64 * h, &y, h, &mut out);
                y.copy_from_slice(&out);
            }
            (y[0] - 1f64.exp()).abs()
        };
        let e1 = run(0.1, &mut f);
        let e2 = run(0.05, &mut f);
        let ratio = e1 / e2;
        assert!(ratio > 14.0 && ratio < 18.0, "ratio {ratio}");
    }
}
