//! Lyapunov functionals and stability constants evaluated along simulated
//! trajectories.
//!
//! Everything here needs the true coefficient `c` (through `c_tilde = c_hat - c`)
//! and therefore only makes sense for simulated plants.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{sq_norm, weighted_sq_norm};
use crate::model::LinearizedParams;
use crate::sim::AdaptiveGains;

/// Margin applied to the strict lower bounds on `delta` and `k`.
const MARGIN: f64 = 1.1;

/// Weights of the target-system functional `V = V1 + a V2` and of the
/// identifier functional `V3`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LyapunovConstants {
    pub a: f64,
    pub delta: f64,
    pub k: f64,
    /// Decay rate of `V` guaranteed by the choice of `delta`, `k`.
    pub d: f64,
    pub gamma: f64,
    pub gamma1: f64,
    pub a3: f64,
    pub a4: f64,
}

impl LyapunovConstants {
    /// Picks `a = (lambda r^2 + 1) / mu` and `delta`, `k` 10% above their
    /// admissible lower bounds, with `A3 = A4 = 1`. Speeds are the normalized ones.
    pub fn from_params(lp: &LinearizedParams, gains: &AdaptiveGains) -> Self {
        Self::with_free_constants(lp, gains, 1.0, 1.0)
    }

    pub fn with_free_constants(lp: &LinearizedParams, gains: &AdaptiveGains, a3: f64, a4: f64) -> Self {
        let (lambda, mu) = lp.speeds();
        let a = (lambda * lp.r * lp.r + 1.0) / mu;
        let v1_loss = 4.0 + 8.0 * a3 * a3 + 4.0 * a * (1.0 + a3).powi(2);
        let delta = MARGIN * (v1_loss / lambda).max(1.0);
        let v2_loss = 8.0 * (-delta).exp() * a4 * a4 + a * (3.0 + 4.0 * a4 * a4);
        let k = MARGIN * v2_loss / (a * mu);
        let d = (lambda * delta - v1_loss).min((a * k * mu - v2_loss) / a);
        Self { a, delta, k, d, gamma: gains.gamma, gamma1: gains.gamma1, a3, a4 }
    }
}

/// `(V1, V2, V1 + a V2)` with `V1 = int e^{-delta x} w^2`, `V2 = int e^{k x} z^2`.
pub fn lyapunov_v1_v2(w: &[f64], z: &[f64], delta: f64, k: f64, a: f64) -> (f64, f64, f64) {
    let v1 = weighted_sq_norm(w, |x| (-delta * x).exp());
    let v2 = weighted_sq_norm(z, |x| (k * x).exp());
    (v1, v2, v1 + a * v2)
}

/// `V3 = int e^{-gamma x} e^2 + int e^{gamma x} eps^2 + ||c_tilde||^2 / gamma1`.
pub fn lyapunov_v3(e: &[f64], eps: &[f64], c_tilde: &[f64], gamma: f64, gamma1: f64) -> f64 {
    weighted_sq_norm(e, |x| (-gamma * x).exp())
        + weighted_sq_norm(eps, |x| (gamma * x).exp())
        + sq_norm(c_tilde) / gamma1
}

/// `S = ||u||^2 + ||v||^2 + ||u_hat||^2 + ||v_hat||^2 + ||c_tilde||^2`.
pub fn global_norm_s(u: &[f64], v: &[f64], u_hat: &[f64], v_hat: &[f64], c_tilde: &[f64]) -> f64 {
    [u, v, u_hat, v_hat, c_tilde].iter().map(|f| sq_norm(f)).sum()
}

/// Admissible kernel-approximation threshold
/// `sqrt(2d - 1) / (2 sqrt(mu e^k L1))` with `L1 = 2 L^2 + 3 L + 1`.
pub fn epsilon0(d: f64, mu: f64, k: f64, l_bar: f64) -> Result<f64> {
    if !(d > 0.5) {
        return Err(Error::InvalidParams(format!("decay rate d = {d} must exceed 1/2")));
    }
    let l1 = 2.0 * l_bar * l_bar + 3.0 * l_bar + 1.0;
    Ok((2.0 * d - 1.0).sqrt() / (2.0 * (mu * k.exp() * l1).sqrt()))
}

/// Constants of `k1 S <= V4 <= k2 S` for kernels bounded by `k_bar` and
/// inverse kernels bounded by `l_bar`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Equivalence {
    pub k1: f64,
    pub k2: f64,
}

impl Equivalence {
    pub fn new(c: &LyapunovConstants, k_bar: f64, l_bar: f64) -> Self {
        let (a, eg, ek) = (c.a, c.gamma.exp(), c.k.exp());
        let k1 = [
            (-c.delta).exp() / (3.0 + 6.0 * l_bar * l_bar),
            a / (6.0 * (1.0 + l_bar).powi(2)),
            1.0 / (2.0 * eg),
            0.5,
            1.0 / c.gamma1,
        ]
        .into_iter()
        .fold(f64::INFINITY, f64::min);
        let k2 = [
            3.0 + 2.0 * a * ek * k_bar * k_bar,
            2.0 * a * ek * (1.0 + k_bar).powi(2) + 2.0 * eg,
            2.0,
            2.0 * eg,
            1.0 / c.gamma1,
        ]
        .into_iter()
        .fold(0.0, f64::max);
        Self { k1, k2 }
    }

    pub fn holds(&self, s: f64, v4: f64) -> bool {
        let slack = 1e-12 * s.max(v4);
        self.k1 * s <= v4 + slack && v4 <= self.k2 * s + slack
    }
}
