//! Uniform node grid on the unit interval and the quadrature/interpolation
//! helpers shared by the simulator, controller and diagnostics.
//!
//! A grid with `n_x` cells has `n_x + 1` nodes `x_i = i / n_x`; boundary
//! values live on the end nodes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_x: usize,
    pub dt: f64,
    pub t_end: f64,
}

impl GridSpec {
    pub fn new(n_x: usize, dt: f64, t_end: f64) -> Result<Self> {
        if n_x < 16 {
            return Err(Error::InvalidParams(format!("n_x = {n_x} must be at least 16")));
        }
        if !(dt > 0.0 && dt.is_finite()) || !(t_end > 0.0 && t_end.is_finite()) {
            return Err(Error::InvalidParams("dt and t_end must be positive".into()));
        }
        Ok(Self { n_x, dt, t_end })
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.n_x as f64
    }

    pub fn n_nodes(&self) -> usize {
        self.n_x + 1
    }

    pub fn nodes(&self) -> Vec<f64> {
        uniform_nodes(self.n_nodes())
    }

    pub fn n_steps(&self) -> usize {
        (self.t_end / self.dt - 1e-9).ceil() as usize
    }

    /// Largest courant number for the given normalized speeds.
    pub fn courant(&self, lambda: f64, mu: f64) -> f64 {
        self.dt * lambda.max(mu) / self.dx()
    }

    pub fn check_cfl(&self, lambda: f64, mu: f64) -> Result<f64> {
        let courant = self.courant(lambda, mu);
        if courant > 1.0 {
            return Err(Error::Cfl { courant });
        }
        Ok(courant)
    }
}

pub fn uniform_nodes(n: usize) -> Vec<f64> {
    let h = 1.0 / (n - 1) as f64;
    (0..n).map(|i| i as f64 * h).collect()
}

/// Trapezoid rule for samples on uniform nodes spanning `[0, 1]`.
pub fn trapezoid(f: &[f64]) -> f64 {
    match f.len() {
        0 | 1 => 0.0,
        n => {
            let h = 1.0 / (n - 1) as f64;
            let inner: f64 = f[1..n - 1].iter().sum();
            h * (inner + 0.5 * (f[0] + f[n - 1]))
        }
    }
}

/// `int_0^1 weight(x) f(x)^2 dx` by the trapezoid rule.
pub fn weighted_sq_norm(f: &[f64], weight: impl Fn(f64) -> f64) -> f64 {
    let n = f.len();
    if n < 2 {
        return 0.0;
    }
    let h = 1.0 / (n - 1) as f64;
    let g: Vec<f64> = f.iter().enumerate().map(|(i, v)| weight(i as f64 * h) * v * v).collect();
    trapezoid(&g)
}

pub fn sq_norm(f: &[f64]) -> f64 {
    let n = f.len();
    if n < 2 {
        return 0.0;
    }
    let h = 1.0 / (n - 1) as f64;
    let inner: f64 = f[1..n - 1].iter().map(|v| v * v).sum();
    h * (inner + 0.5 * (f[0] * f[0] + f[n - 1] * f[n - 1]))
}

/// Trapezoid approximation of the L2 norm on `[0, 1]`.
pub fn l2_norm(f: &[f64]) -> f64 {
    sq_norm(f).sqrt()
}

pub fn sup_norm(f: &[f64]) -> f64 {
    f.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Piecewise-linear interpolation of uniform samples on `[0, 1]`; `x` is
/// clamped to the interval.
pub fn interp_uniform(values: &[f64], x: f64) -> f64 {
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let s = x.clamp(0.0, 1.0) * (n - 1) as f64;
    let i = (s.floor() as usize).min(n - 2);
    let t = s - i as f64;
    values[i] * (1.0 - t) + values[i + 1] * t
}

/// Resamples uniform samples on `[0, 1]` onto `n` uniform nodes.
pub fn resample(values: &[f64], n: usize) -> Vec<f64> {
    if values.len() == n {
        return values.to_vec();
    }
    uniform_nodes(n).into_iter().map(|x| interp_uniform(values, x)).collect()
}

pub fn all_finite(f: &[f64]) -> bool {
    f.iter().all(|v| v.is_finite())
}
