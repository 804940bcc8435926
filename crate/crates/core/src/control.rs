//! Adaptive backstepping boundary controller and the closed-loop driver.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::deeponet::{DeepOnet, PreparedOperator};
use crate::diagnostics::{epsilon0, global_norm_s, lyapunov_v1_v2, lyapunov_v3, Equivalence, LyapunovConstants};
use crate::error::{Error, Result};
use crate::grid::{l2_norm, resample, GridSpec};
use crate::kernel::{
    apply_transform, kernel_time_derivative, solve_inverse_kernels, solve_kernels, KernelMeta, KernelPair, TriMesh,
    DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use crate::model::{derive_linearized, sinusoidal_initial, LinearizedParams, RiemannMap, TrafficParams};
use crate::sim::{AdaptiveGains, IdentifierState, PlantState, Transport};
use crate::trace::{SimTrace, Snapshot, TraceRow, TraceSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelSource {
    ClassicalSolver,
    NeuralOperator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub kernel_source: KernelSource,
    /// Seconds between kernel recomputations.
    pub kernel_refresh_dt: f64,
    pub gains: AdaptiveGains,
    /// Initial guess of the relaxation time; `c_hat(x, 0) = -1 / (2 tau_guess)`.
    pub tau_guess: f64,
    /// Nodes per side of the kernel mesh.
    pub kernel_mesh: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            kernel_source: KernelSource::ClassicalSolver,
            kernel_refresh_dt: 0.1,
            gains: AdaptiveGains::default(),
            tau_guess: 60.0,
            kernel_mesh: 41,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self, g: &GridSpec) -> Result<()> {
        self.gains.validate()?;
        if !(self.kernel_refresh_dt >= g.dt * (1.0 - 1e-9)) {
            return Err(Error::InvalidParams(format!(
                "kernel_refresh_dt = {} must be at least dt = {}",
                self.kernel_refresh_dt, g.dt
            )));
        }
        if !(self.tau_guess > 0.0) || !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidParams("tau_guess, tol and max_iter must be positive".into()));
        }
        TriMesh::new(self.kernel_mesh)?;
        Ok(())
    }

    /// Whole number of time steps between kernel refreshes.
    pub fn refresh_steps(&self, g: &GridSpec) -> usize {
        ((self.kernel_refresh_dt / g.dt).round() as usize).max(1)
    }
}

/// Physical parameters, the linearized system they induce and the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scenario {
    pub traffic: TrafficParams,
    pub linear: LinearizedParams,
    pub grid: GridSpec,
    /// Scale of the sinusoidal initial perturbation (1 is the reference case).
    pub perturbation: f64,
}

impl Scenario {
    pub fn new(traffic: TrafficParams, grid: GridSpec) -> Result<Self> {
        Ok(Self { traffic, linear: derive_linearized(&traffic)?, grid, perturbation: 1.0 })
    }

    /// Reference road with `n_x = 60`, `dt = 0.1 s`, `t_end = 300 s`.
    pub fn reference() -> Self {
        Self::new(TrafficParams::reference(), GridSpec::new(60, 0.1, 300.0).unwrap()).unwrap()
    }

    pub fn with_reflection(mut self, r: f64) -> Self {
        self.linear = self.linear.with_reflection(r);
        self
    }

    pub fn initial_state(&self) -> PlantState {
        let (u, v) = sinusoidal_initial(&self.traffic, &self.grid.nodes());
        let scale = |f: Vec<f64>| f.into_iter().map(|x| x * self.perturbation).collect();
        PlantState { u: scale(u), v: scale(v), t: 0.0 }
    }
}

/// `U = int_0^1 Ku(1, xi) u_hat(xi) + Kv(1, xi) v_hat(xi) dxi` by the
/// trapezoid rule on the state grid; kernels on another mesh are interpolated.
pub fn control_value(kp: &KernelPair, i: &IdentifierState) -> Result<f64> {
    let n = i.u_hat.len();
    if n < 2 || i.v_hat.len() != n {
        return Err(Error::Shape(format!("identifier fields have {} and {} nodes", n, i.v_hat.len())));
    }
    let h = 1.0 / (n - 1) as f64;
    let same = kp.mesh().n() == n;
    let mut sum = 0.0;
    for j in 0..n {
        let (ku, kv) = if same { (kp.ku_at(n - 1, j), kp.kv_at(n - 1, j)) } else { kp.eval(1.0, j as f64 * h) };
        let w = if j == 0 || j == n - 1 { 0.5 * h } else { h };
        sum += w * (ku * i.u_hat[j] + kv * i.v_hat[j]);
    }
    Ok(sum)
}

/// Target-system variables `(w, z) = (u_hat, v_hat - int Ku u_hat - int Kv v_hat)`.
pub fn backstepping_transform(kp: &KernelPair, i: &IdentifierState) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = i.u_hat.len();
    let kg = kp.resample(n)?;
    let z = apply_transform(&kg, &i.u_hat, &i.v_hat)?;
    Ok((i.u_hat.clone(), z))
}

/// Source of kernels for a frozen `c_hat` sampled on the provider's mesh.
pub trait KernelProvider {
    fn mesh(&self) -> TriMesh;
    fn acquire(&mut self, c_hat: &[f64]) -> Result<KernelPair>;
}

pub struct SolverProvider {
    lp: LinearizedParams,
    mesh: TriMesh,
    tol: f64,
    max_iter: usize,
}

impl SolverProvider {
    pub fn new(lp: LinearizedParams, mesh: TriMesh, tol: f64, max_iter: usize) -> Self {
        Self { lp, mesh, tol, max_iter }
    }
}

impl KernelProvider for SolverProvider {
    fn mesh(&self) -> TriMesh {
        self.mesh
    }

    fn acquire(&mut self, c_hat: &[f64]) -> Result<KernelPair> {
        solve_kernels(c_hat, &self.lp, &self.mesh, self.tol, self.max_iter)
    }
}

pub struct OperatorProvider {
    op: PreparedOperator,
}

impl OperatorProvider {
    pub fn new(model: &DeepOnet, lp: &LinearizedParams, mesh: TriMesh) -> Result<Self> {
        Ok(Self { op: PreparedOperator::new(model, mesh, KernelMeta::from_params(lp))? })
    }
}

impl KernelProvider for OperatorProvider {
    fn mesh(&self) -> TriMesh {
        self.op.mesh()
    }

    fn acquire(&mut self, c_hat: &[f64]) -> Result<KernelPair> {
        self.op.kernels(c_hat)
    }
}

/// Kernels handed out at a refresh, with the estimate they were computed for.
pub struct RefreshEvent<'a> {
    pub t: f64,
    pub c_hat: &'a [f64],
    pub kernels: &'a KernelPair,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    /// Store field snapshots every this many steps (0 disables them).
    pub snapshot_every: usize,
    /// Compute inverse kernels and the norm-equivalence check at each refresh.
    pub diagnostics: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { snapshot_every: 10, diagnostics: true }
    }
}

struct Monitor {
    constants: LyapunovConstants,
    c_true: Vec<f64>,
    c_bar: f64,
    map: RiemannMap,
    nodes: Vec<f64>,
    summary: TraceSummary,
    prev_v3: Option<f64>,
    equivalence: Equivalence,
}

impl Monitor {
    fn new(sc: &Scenario, gains: &AdaptiveGains, tr: &Transport) -> Self {
        let constants = LyapunovConstants::from_params(&sc.linear, gains);
        Self {
            constants,
            c_true: tr.coefficient().to_vec(),
            c_bar: sc.linear.c_bar,
            map: RiemannMap::new(&sc.traffic),
            nodes: tr.nodes().to_vec(),
            summary: TraceSummary {
                constants: Some(constants),
                c_hat_excess: f64::NEG_INFINITY,
                ..Default::default()
            },
            prev_v3: None,
            equivalence: Equivalence::new(&constants, 0.0, 0.0),
        }
    }

    fn update_bounds(&mut self, k_bar: f64, l_bar: f64) {
        self.summary.k_bar = self.summary.k_bar.max(k_bar);
        self.summary.l_bar = self.summary.l_bar.max(l_bar);
        self.equivalence = Equivalence::new(&self.constants, k_bar, l_bar);
    }

    fn row(&mut self, s: &PlantState, id: &IdentifierState, kg: &KernelPair, control: f64) -> Result<TraceRow> {
        let c = &self.constants;
        let (e, eps) = id.errors(s);
        let c_tilde: Vec<f64> = id.c_hat.iter().zip(&self.c_true).map(|(a, b)| a - b).collect();
        let z = apply_transform(kg, &id.u_hat, &id.v_hat)?;
        let (v1, v2, v) = lyapunov_v1_v2(&id.u_hat, &z, c.delta, c.k, c.a);
        let v3 = lyapunov_v3(&e, &eps, &c_tilde, c.gamma, c.gamma1);
        let v4 = v + v3;
        let big_s = global_norm_s(&s.u, &s.v, &id.u_hat, &id.v_hat, &c_tilde);
        if !self.equivalence.holds(big_s, v4) {
            self.summary.equivalence_violations += 1;
        }
        if let Some(p) = self.prev_v3 {
            self.summary.v3_max_increase = self.summary.v3_max_increase.max(v3 - p);
        }
        self.prev_v3 = Some(v3);
        let excess = id.c_hat.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.abs() - self.c_bar));
        self.summary.c_hat_excess = self.summary.c_hat_excess.max(excess);

        let (rho, vel) = self.map.fields_to_physical(&self.nodes, &s.u, &s.v);
        let rho_dev: Vec<f64> = rho.iter().map(|r| r - self.map.rho_star()).collect();
        let vel_dev: Vec<f64> = vel.iter().map(|x| x - self.map.v_star()).collect();
        Ok(TraceRow {
            t: s.t,
            u_norm: l2_norm(&s.u),
            v_norm: l2_norm(&s.v),
            e_norm: l2_norm(&e),
            eps_norm: l2_norm(&eps),
            control,
            v1,
            v2,
            v3,
            v4,
            s: big_s,
            kernel_ns: 0,
            kt_norm: 0.0,
            z1: *z.last().unwrap(),
            rho_dev: l2_norm(&rho_dev),
            vel_dev: l2_norm(&vel_dev),
        })
    }
}

fn snapshot(s: &PlantState, id: &IdentifierState) -> Snapshot {
    Snapshot { t: s.t, u: s.u.clone(), v: s.v.clone(), c_hat: id.c_hat.clone() }
}

/// Closed loop with kernels from `provider`, refreshed every
/// `cfg.kernel_refresh_dt` seconds. Each refresh is reported to `on_refresh`.
pub fn run_closed_loop_with(
    sc: &Scenario,
    cfg: &ControllerConfig,
    provider: &mut dyn KernelProvider,
    opts: RunOptions,
    on_refresh: &mut dyn FnMut(&RefreshEvent),
) -> Result<SimTrace> {
    run_loop(sc, cfg, Some(provider), opts, on_refresh, "closed-loop")
}

/// Closed loop with the kernel source selected by `cfg`.
pub fn run_closed_loop(
    sc: &Scenario,
    cfg: &ControllerConfig,
    model: Option<&DeepOnet>,
    opts: RunOptions,
) -> Result<SimTrace> {
    let mesh = TriMesh::new(cfg.kernel_mesh)?;
    let mut trace = match cfg.kernel_source {
        KernelSource::ClassicalSolver => {
            let mut p = SolverProvider::new(sc.linear, mesh, cfg.tol, cfg.max_iter);
            run_loop(sc, cfg, Some(&mut p), opts, &mut |_| {}, "exact")?
        }
        KernelSource::NeuralOperator => {
            let model = model.ok_or_else(|| {
                Error::InvalidParams("the neural-operator kernel source needs a trained model".into())
            })?;
            let mut p = OperatorProvider::new(model, &sc.linear, mesh)?;
            run_loop(sc, cfg, Some(&mut p), opts, &mut |_| {}, "no")?
        }
    };
    if opts.diagnostics {
        let (_, mu) = sc.linear.speeds();
        let c = trace.summary.constants.unwrap();
        trace.summary.epsilon0 = epsilon0(c.d, mu, c.k, trace.summary.l_bar).ok();
    }
    Ok(trace)
}

/// Plant and identifier with `U = 0`; monitors use the identity transform.
pub fn run_open_loop(sc: &Scenario, cfg: &ControllerConfig, opts: RunOptions) -> Result<SimTrace> {
    run_loop(sc, cfg, None, opts, &mut |_| {}, "open-loop")
}

fn run_loop(
    sc: &Scenario,
    cfg: &ControllerConfig,
    mut provider: Option<&mut dyn KernelProvider>,
    opts: RunOptions,
    on_refresh: &mut dyn FnMut(&RefreshEvent),
    label: &str,
) -> Result<SimTrace> {
    cfg.validate(&sc.grid)?;
    let tr = Transport::new(&sc.linear, &sc.grid)?;
    let n_nodes = sc.grid.n_nodes();
    let steps = sc.grid.n_steps();
    let refresh_every = cfg.refresh_steps(&sc.grid);
    let refresh_dt = refresh_every as f64 * sc.grid.dt;
    let meta = KernelMeta::from_params(&sc.linear);

    let mut s = sc.initial_state();
    let mut id = IdentifierState::from_plant(&s, cfg.tau_guess, cfg.gains);
    let mut monitor = Monitor::new(sc, &cfg.gains, &tr);
    let mut kg = KernelPair::zeros(TriMesh::new(n_nodes)?, meta);
    let mut prev: Option<KernelPair> = None;
    let mut rows = Vec::with_capacity(steps + 1);
    let mut snapshots = Vec::new();
    if provider.is_none() {
        monitor.update_bounds(0.0, 0.0);
    }

    for n in 0..=steps {
        s.t = n as f64 * sc.grid.dt;
        let mut kernel_ns = 0;
        let mut kt_norm = 0.0;
        if let Some(p) = provider.as_deref_mut() {
            if n < steps && n % refresh_every == 0 {
                let c_mesh = resample(&id.c_hat, p.mesh().n());
                let start = Instant::now();
                let kp = p.acquire(&c_mesh)?;
                kernel_ns = start.elapsed().as_nanos() as u64;
                if let Some(pk) = &prev {
                    kt_norm = kernel_time_derivative(pk, &kp, refresh_dt)?.l2_norm();
                    monitor.summary.kt_sq_integral += kt_norm * kt_norm * refresh_dt;
                }
                on_refresh(&RefreshEvent { t: s.t, c_hat: &c_mesh, kernels: &kp });
                kg = kp.resample(n_nodes)?;
                let (ku, kv) = kg.sup_norms();
                let l_bar = if opts.diagnostics {
                    let (lu, lv) = solve_inverse_kernels(&kg, 1e-12, 500)?.sup_norms();
                    lu.max(lv)
                } else {
                    0.0
                };
                monitor.update_bounds(ku.max(kv), l_bar);
                monitor.summary.refreshes += 1;
                monitor.summary.kernel_ns_total += kernel_ns;
                prev = Some(kp);
            }
        }
        let control = if provider.is_some() { control_value(&kg, &id)? } else { 0.0 };
        let mut row = monitor.row(&s, &id, &kg, control)?;
        row.kernel_ns = kernel_ns;
        row.kt_norm = kt_norm;
        rows.push(row);
        if opts.snapshot_every > 0 && n % opts.snapshot_every == 0 {
            snapshots.push(snapshot(&s, &id));
        }
        if n == steps {
            break;
        }
        let norm_sq = s.energy();
        let next = tr.step_plant(&s, control)?;
        let mut next_id = tr.step_identifier(&id, &s, control, norm_sq)?;
        tr.update_c_hat(&mut next_id, &next);
        s = next;
        id = next_id;
    }
    if opts.snapshot_every > 0 && steps % opts.snapshot_every != 0 {
        snapshots.push(snapshot(&s, &id));
    }
    let eq = monitor.equivalence;
    let mut summary = monitor.summary;
    summary.k1 = eq.k1;
    summary.k2 = eq.k2;
    Ok(SimTrace { label: label.into(), nodes: monitor.nodes, rows, snapshots, summary, map: monitor.map })
}
