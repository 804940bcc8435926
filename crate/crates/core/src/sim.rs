//! Explicit first-order upwind integration of the linearized plant and of the
//! passive identifier, plus the projected update of the coefficient estimate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{all_finite, sq_norm, GridSpec};
use crate::model::LinearizedParams;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub t: f64,
}

impl PlantState {
    pub fn zeros(n_nodes: usize) -> Self {
        Self { u: vec![0.0; n_nodes], v: vec![0.0; n_nodes], t: 0.0 }
    }

    /// `||u||^2 + ||v||^2`, the squared norm of the measured state.
    pub fn energy(&self) -> f64 {
        sq_norm(&self.u) + sq_norm(&self.v)
    }
}

/// Identifier gain `rho` and update-law gains `gamma`, `gamma1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveGains {
    pub rho: f64,
    pub gamma: f64,
    pub gamma1: f64,
}

impl Default for AdaptiveGains {
    fn default() -> Self {
        Self { rho: 1.0, gamma: 1.0, gamma1: 1.0 }
    }
}

impl AdaptiveGains {
    pub fn validate(&self) -> Result<()> {
        if [self.rho, self.gamma, self.gamma1].iter().all(|g| *g > 0.0 && g.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidParams("adaptive gains must be positive".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentifierState {
    pub u_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
    pub c_hat: Vec<f64>,
    pub gains: AdaptiveGains,
}

impl IdentifierState {
    /// Identifier started on the measured state with a constant estimate
    /// `c_hat = -1 / (2 tau_guess)`.
    pub fn from_plant(s: &PlantState, tau_guess: f64, gains: AdaptiveGains) -> Self {
        Self {
            u_hat: s.u.clone(),
            v_hat: s.v.clone(),
            c_hat: vec![-0.5 / tau_guess; s.u.len()],
            gains,
        }
    }

    /// Errors `(e, eps) = (u - u_hat, v - v_hat)`.
    pub fn errors(&self, s: &PlantState) -> (Vec<f64>, Vec<f64>) {
        let e = s.u.iter().zip(&self.u_hat).map(|(a, b)| a - b).collect();
        let eps = s.v.iter().zip(&self.v_hat).map(|(a, b)| a - b).collect();
        (e, eps)
    }
}

/// Standard projection keeping an estimate inside `[-c_bar, c_bar]`: the raw
/// rate passes unless the estimate sits on the bound and the rate points out.
pub fn project(rate: f64, c_hat: f64, c_bar: f64) -> f64 {
    if (c_hat >= c_bar && rate > 0.0) || (c_hat <= -c_bar && rate < 0.0) {
        0.0
    } else {
        rate
    }
}

/// Discretized transport operator for one parameter set and grid.
#[derive(Debug, Clone)]
pub struct Transport {
    lambda: f64,
    mu: f64,
    r: f64,
    c: Vec<f64>,
    c_bar: f64,
    nodes: Vec<f64>,
    dt: f64,
    courant_u: f64,
    courant_v: f64,
}

impl Transport {
    /// Rejects grids violating the CFL bound before any stepping happens.
    pub fn new(lp: &LinearizedParams, g: &GridSpec) -> Result<Self> {
        let (lambda, mu) = lp.speeds();
        g.check_cfl(lambda, mu)?;
        let nodes = g.nodes();
        Ok(Self {
            lambda,
            mu,
            r: lp.r,
            c: nodes.iter().map(|&x| lp.c_true(x)).collect(),
            c_bar: lp.c_bar,
            dt: g.dt,
            courant_u: lambda * g.dt / g.dx(),
            courant_v: mu * g.dt / g.dx(),
            nodes,
        })
    }

    /// Replaces the plant coefficient (used for tests with `c = 0`).
    pub fn with_coefficient(mut self, c: Vec<f64>) -> Self {
        assert_eq!(c.len(), self.nodes.len());
        self.c = c;
        self
    }

    pub fn speeds(&self) -> (f64, f64) {
        (self.lambda, self.mu)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn coefficient(&self) -> &[f64] {
        &self.c
    }

    pub fn c_bar(&self) -> f64 {
        self.c_bar
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn step_plant(&self, s: &PlantState, control: f64) -> Result<PlantState> {
        let n = s.u.len();
        self.check_len(n)?;
        let (cu, cv, dt) = (self.courant_u, self.courant_v, self.dt);
        let mut u = vec![0.0; n];
        let mut v = vec![0.0; n];
        for i in 1..n {
            u[i] = s.u[i] - cu * (s.u[i] - s.u[i - 1]);
        }
        for i in 0..n - 1 {
            v[i] = s.v[i] + cv * (s.v[i + 1] - s.v[i]) + dt * self.c[i] * s.u[i];
        }
        v[n - 1] = control;
        u[0] = self.r * v[0];
        let t = s.t + dt;
        if !(all_finite(&u) && all_finite(&v)) {
            return Err(Error::Instability { t });
        }
        Ok(PlantState { u, v, t })
    }

    /// Advances `u_hat`, `v_hat` using the plant state at the start of the
    /// step; `norm_sq` is `||u||^2 + ||v||^2` of that same state.
    pub fn step_identifier(
        &self,
        i: &IdentifierState,
        s: &PlantState,
        control: f64,
        norm_sq: f64,
    ) -> Result<IdentifierState> {
        let n = s.u.len();
        self.check_len(n)?;
        if i.u_hat.len() != n || i.v_hat.len() != n || i.c_hat.len() != n {
            return Err(Error::Shape("identifier and plant grids differ".into()));
        }
        let (cu, cv, dt) = (self.courant_u, self.courant_v, self.dt);
        let gain = i.gains.rho * norm_sq;
        let mut u_hat = vec![0.0; n];
        let mut v_hat = vec![0.0; n];
        for k in 1..n {
            let e = s.u[k] - i.u_hat[k];
            u_hat[k] = i.u_hat[k] - cu * (i.u_hat[k] - i.u_hat[k - 1]) + dt * gain * e;
        }
        for k in 0..n - 1 {
            let eps = s.v[k] - i.v_hat[k];
            v_hat[k] = i.v_hat[k]
                + cv * (i.v_hat[k + 1] - i.v_hat[k])
                + dt * i.c_hat[k] * s.u[k]
                + dt * gain * eps;
        }
        v_hat[n - 1] = control;
        u_hat[0] = self.r * v_hat[0];
        if !(all_finite(&u_hat) && all_finite(&v_hat)) {
            return Err(Error::Instability { t: s.t + dt });
        }
        Ok(IdentifierState { u_hat, v_hat, c_hat: i.c_hat.clone(), gains: i.gains })
    }

    /// Forward-Euler step of `c_hat_t = Proj{gamma1 e^{gamma x} eps u, c_hat}`,
    /// followed by a clamp to `[-c_bar, c_bar]`.
    pub fn update_c_hat(&self, i: &mut IdentifierState, s: &PlantState) {
        let AdaptiveGains { gamma, gamma1, .. } = i.gains;
        for k in 0..i.c_hat.len() {
            let eps = s.v[k] - i.v_hat[k];
            let rate = gamma1 * (gamma * self.nodes[k]).exp() * eps * s.u[k];
            let rate = project(rate, i.c_hat[k], self.c_bar);
            i.c_hat[k] = (i.c_hat[k] + self.dt * rate).clamp(-self.c_bar, self.c_bar);
        }
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.nodes.len() {
            return Err(Error::Shape(format!("field has {n} nodes, grid has {}", self.nodes.len())));
        }
        Ok(())
    }
}

pub fn step_plant(s: &PlantState, lp: &LinearizedParams, control: f64, g: &GridSpec) -> Result<PlantState> {
    Transport::new(lp, g)?.step_plant(s, control)
}

pub fn step_identifier(
    i: &IdentifierState,
    s: &PlantState,
    control: f64,
    lp: &LinearizedParams,
    g: &GridSpec,
) -> Result<IdentifierState> {
    Transport::new(lp, g)?.step_identifier(i, s, control, s.energy())
}

pub fn update_c_hat(i: &mut IdentifierState, s: &PlantState, lp: &LinearizedParams, g: &GridSpec) -> Result<()> {
    Transport::new(lp, g)?.update_c_hat(i, s);
    Ok(())
}
