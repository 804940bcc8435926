//! Physical ARZ parameters, the Greenshields equilibrium and the constants of
//! the linearized 2x2 transport system on the normalized domain `x in [0, 1]`.
//!
//! Space is nondimensionalized by the road length everywhere downstream of
//! this module, so the transport speeds used by the simulator and the kernel
//! solver are `lambda / L` and `mu / L` (1/s), while time stays in seconds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical ARZ parameters in SI units (densities in veh/m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficParams {
    /// Free-flow speed (m/s).
    pub v_f: f64,
    /// Maximum density (veh/m).
    pub rho_m: f64,
    /// Equilibrium density (veh/m).
    pub rho_star: f64,
    /// Relaxation time (s).
    pub tau: f64,
    /// Pressure exponent.
    pub gamma0: f64,
    /// Road length (m).
    pub length: f64,
}

impl TrafficParams {
    pub fn new(v_f: f64, rho_m: f64, rho_star: f64, tau: f64, gamma0: f64, length: f64) -> Result<Self> {
        let p = Self { v_f, rho_m, rho_star, tau, gamma0, length };
        p.validate()?;
        Ok(p)
    }

    /// The 600 m congested road used throughout the examples and the acceptance suite.
    pub fn reference() -> Self {
        Self { v_f: 40.0, rho_m: 0.160, rho_star: 0.120, tau: 60.0, gamma0: 1.0, length: 600.0 }
    }

    pub fn with_tau(self, tau: f64) -> Result<Self> {
        Self::new(self.v_f, self.rho_m, self.rho_star, tau, self.gamma0, self.length)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.v_f, self.rho_m, self.rho_star, self.tau, self.gamma0, self.length]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidParams("traffic parameters must be finite".into()));
        }
        if self.v_f <= 0.0 || self.rho_m <= 0.0 || self.tau <= 0.0 || self.gamma0 <= 0.0 || self.length <= 0.0 {
            return Err(Error::InvalidParams(
                "v_f, rho_m, tau, gamma0 and length must be positive".into(),
            ));
        }
        if !(self.rho_star > 0.0 && self.rho_star < self.rho_m) {
            return Err(Error::InvalidParams(format!(
                "equilibrium density {} must lie in (0, rho_m = {})",
                self.rho_star, self.rho_m
            )));
        }
        Ok(())
    }

    /// Pressure scale `c0 = v_f / rho_m^gamma0`, which makes `V(rho) = v_f - p(rho)`.
    pub fn pressure_scale(&self) -> f64 {
        self.v_f / self.rho_m.powf(self.gamma0)
    }

    pub fn pressure(&self, rho: f64) -> f64 {
        self.pressure_scale() * rho.powf(self.gamma0)
    }

    /// Equilibrium speed `v* = V(rho*)`.
    pub fn v_star(&self) -> f64 {
        self.v_f * (1.0 - (self.rho_star / self.rho_m).powf(self.gamma0))
    }

    /// Inflow `q* = rho* V(rho*)` (veh/s).
    pub fn flux_star(&self) -> f64 {
        self.rho_star * self.v_star()
    }
}

/// Greenshields equilibrium speed `V(rho) = v_f (1 - (rho/rho_m)^gamma0)`.
pub fn equilibrium_velocity(p: &TrafficParams, rho: f64) -> Result<f64> {
    if !(0.0..=p.rho_m).contains(&rho) {
        return Err(Error::Domain(format!("density {rho} outside [0, {}]", p.rho_m)));
    }
    Ok(p.v_f * (1.0 - (rho / p.rho_m).powf(p.gamma0)))
}

/// Constants of the linearized system
///
/// ```text
/// u_t = -lambda u_x,   v_t = mu v_x + c(x) u,   u(0) = r v(0),   v(1) = U
/// ```
///
/// `lambda` and `mu` are kept in m/s; [`LinearizedParams::speeds`] returns the
/// normalized-domain values used by every solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearizedParams {
    pub lambda: f64,
    pub mu: f64,
    pub r: f64,
    /// `c(x) = -c_amp * exp(-c_decay * x)` on normalized `x`.
    pub c_amp: f64,
    pub c_decay: f64,
    /// Known bound on `|c|` (1/s).
    pub c_bar: f64,
    pub length: f64,
}

impl LinearizedParams {
    /// Transport speeds on the unit domain, `(lambda / L, mu / L)` in 1/s.
    pub fn speeds(&self) -> (f64, f64) {
        (self.lambda / self.length, self.mu / self.length)
    }

    pub fn c_true(&self, x: f64) -> f64 {
        -self.c_amp * (-self.c_decay * x).exp()
    }

    /// Same parameters with a different reflection coefficient.
    pub fn with_reflection(mut self, r: f64) -> Self {
        self.r = r;
        self
    }
}

/// Derives the linearized constants from physical parameters.
///
/// `r` is evaluated as `(rho* V(rho*) + v*) / v*` on the SI values.
pub fn derive_linearized(p: &TrafficParams) -> Result<LinearizedParams> {
    p.validate()?;
    let v_star = p.v_star();
    if v_star <= 0.0 {
        return Err(Error::InvalidParams(format!("equilibrium speed {v_star} must be positive")));
    }
    let lambda = v_star;
    let mu = p.gamma0 * p.pressure(p.rho_star) - v_star;
    if mu <= 0.0 {
        return Err(Error::FreeFlow { mu });
    }
    let r = (p.rho_star * v_star + v_star) / v_star;
    Ok(LinearizedParams {
        lambda,
        mu,
        r,
        c_amp: 1.0 / p.tau,
        c_decay: p.length / (p.tau * v_star),
        c_bar: 1.0 / p.tau,
        length: p.length,
    })
}

/// Samples the true coefficient `c(x)` at the given normalized nodes.
pub fn true_c_sampler(lp: &LinearizedParams, nodes: &[f64]) -> Vec<f64> {
    nodes.iter().map(|&x| lp.c_true(x)).collect()
}

/// Change of coordinates between physical deviations and the transport
/// variables: `v = v1 - v*` and `u = (v~ + p'(rho*) rho~) exp(x L / (tau v*))`.
///
/// The map needs the true relaxation time, so it is only used for
/// simulation output and initial conditions.
#[derive(Debug, Clone, Copy)]
pub struct RiemannMap {
    rho_star: f64,
    v_star: f64,
    dp_drho: f64,
    decay: f64,
}

impl RiemannMap {
    pub fn new(p: &TrafficParams) -> Self {
        let v_star = p.v_star();
        Self {
            rho_star: p.rho_star,
            v_star,
            dp_drho: p.gamma0 * p.pressure(p.rho_star) / p.rho_star,
            decay: p.length / (p.tau * v_star),
        }
    }

    pub fn rho_star(&self) -> f64 {
        self.rho_star
    }

    pub fn v_star(&self) -> f64 {
        self.v_star
    }

    /// Physical `(rho, v1)` at normalized `x` to `(u, v)`.
    pub fn to_riemann(&self, x: f64, rho: f64, vel: f64) -> (f64, f64) {
        let v = vel - self.v_star;
        let w = v + self.dp_drho * (rho - self.rho_star);
        (w * (self.decay * x).exp(), v)
    }

    /// `(u, v)` at normalized `x` back to physical `(rho, v1)`.
    pub fn to_physical(&self, x: f64, u: f64, v: f64) -> (f64, f64) {
        let w = u * (-self.decay * x).exp();
        let rho = self.rho_star + (w - v) / self.dp_drho;
        (rho, self.v_star + v)
    }

    pub fn fields_to_physical(&self, nodes: &[f64], u: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        nodes
            .iter()
            .zip(u.iter().zip(v))
            .map(|(&x, (&u, &v))| self.to_physical(x, u, v))
            .unzip()
    }
}

/// Sinusoidal stop-and-go initial condition
/// `rho(x,0) = rho* (1 + 0.1 sin(3 pi x))`, `v1(x,0) = v* (1 - 0.01 sin(3 pi x))`
/// mapped to `(u, v)` on the given nodes.
pub fn sinusoidal_initial(p: &TrafficParams, nodes: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let map = RiemannMap::new(p);
    let v_star = p.v_star();
    nodes
        .iter()
        .map(|&x| {
            let s = (3.0 * std::f64::consts::PI * x).sin();
            map.to_riemann(x, p.rho_star * (1.0 + 0.1 * s), v_star * (1.0 - 0.01 * s))
        })
        .unzip()
}
