//! Timing of kernel acquisition: classical solver against the trained operator.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::control::{KernelProvider, OperatorProvider, SolverProvider};
use crate::deeponet::DeepOnet;
use crate::error::Result;
use crate::grid::uniform_nodes;
use crate::kernel::{KernelPair, TriMesh};
use crate::model::{true_c_sampler, LinearizedParams};

/// Wall-time percentiles of one kernel source, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timing {
    pub n: usize,
    pub median_ns: f64,
    pub p10_ns: f64,
    pub p90_ns: f64,
}

impl Timing {
    /// `None` for an empty sample.
    pub fn from_samples(samples: &[u64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut s: Vec<f64> = samples.iter().map(|&v| v as f64).collect();
        s.sort_by(f64::total_cmp);
        Some(Self { n: s.len(), median_ns: percentile(&s, 0.5), p10_ns: percentile(&s, 0.1), p90_ns: percentile(&s, 0.9) })
    }
}

/// Linear interpolation between order statistics of a sorted sample.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-input mean absolute gap between operator and solver kernels,
/// summarized over the inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedError {
    pub ku_max: f64,
    pub ku_mean: f64,
    pub kv_max: f64,
    pub kv_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub n: usize,
    pub mesh: usize,
    pub tol: f64,
    pub solver: Option<Timing>,
    pub operator: Option<Timing>,
    /// Ratio of median solver time to median operator time.
    pub speedup: Option<f64>,
    pub paired: Option<PairedError>,
    /// End-to-end closed-loop wall time (s) with each kernel source.
    pub closed_loop_solver_s: Option<f64>,
    pub closed_loop_operator_s: Option<f64>,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "kernel acquisition on a {} x {} mesh, solver tol {:e}, N = {}", self.mesh, self.mesh, self.tol, self.n)?;
        let row = |f: &mut fmt::Formatter<'_>, name: &str, t: &Option<Timing>| match t {
            Some(t) => writeln!(
                f,
                "  {name:<9} median {:>10.1} us   p10 {:>10.1} us   p90 {:>10.1} us",
                t.median_ns / 1e3,
                t.p10_ns / 1e3,
                t.p90_ns / 1e3
            ),
            None => writeln!(f, "  {name:<9} no samples"),
        };
        row(f, "solver", &self.solver)?;
        row(f, "operator", &self.operator)?;
        if let Some(s) = self.speedup {
            writeln!(f, "  speedup   {s:.1}x")?;
        }
        if let Some(p) = &self.paired {
            writeln!(
                f,
                "  paired mean |dK|: Ku max {:.3e} mean {:.3e}, Kv max {:.3e} mean {:.3e}",
                p.ku_max, p.ku_mean, p.kv_max, p.kv_mean
            )?;
        }
        if let (Some(a), Some(b)) = (self.closed_loop_solver_s, self.closed_loop_operator_s) {
            writeln!(f, "  closed loop: solver {a:.2} s, operator {b:.2} s ({:.1}x)", a / b)?;
        }
        Ok(())
    }
}

/// Coefficient profiles for timing: scaled true profiles `s c(x; tau)` with
/// `tau ~ U[tau_lo, tau_hi]` and `s ~ U[0.5, 1]`, sampled on `n` nodes.
pub fn sample_inputs(lp: &LinearizedParams, n: usize, count: usize, tau_range: (f64, f64), seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = uniform_nodes(n);
    let base_tau = 1.0 / lp.c_bar;
    (0..count)
        .map(|_| {
            let tau = if tau_range.1 > tau_range.0 { rng.random_range(tau_range.0..tau_range.1) } else { tau_range.0 };
            let s: f64 = rng.random_range(0.5..1.0);
            // c scales with 1/tau at fixed shape
            true_c_sampler(lp, &nodes).into_iter().map(|c| s * c * base_tau / tau).collect()
        })
        .collect()
}

fn time_source(p: &mut dyn KernelProvider, inputs: &[Vec<f64>], warmup: usize) -> Result<(Vec<u64>, Vec<KernelPair>)> {
    for c in inputs.iter().cycle().take(warmup) {
        std::hint::black_box(p.acquire(c)?);
    }
    let mut times = Vec::with_capacity(inputs.len());
    let mut out = Vec::with_capacity(inputs.len());
    for c in inputs {
        let start = Instant::now();
        let k = std::hint::black_box(p.acquire(c)?);
        times.push(start.elapsed().as_nanos() as u64);
        out.push(k);
    }
    Ok((times, out))
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Times both kernel sources on identical inputs (warm-up excluded) and
/// compares their outputs. Without a model only the solver is timed.
pub fn bench_kernels(
    lp: &LinearizedParams,
    mesh: TriMesh,
    tol: f64,
    max_iter: usize,
    model: Option<&DeepOnet>,
    inputs: &[Vec<f64>],
    warmup: usize,
) -> Result<BenchReport> {
    let mut report = BenchReport {
        n: inputs.len(),
        mesh: mesh.n(),
        tol,
        solver: None,
        operator: None,
        speedup: None,
        paired: None,
        closed_loop_solver_s: None,
        closed_loop_operator_s: None,
    };
    if inputs.is_empty() {
        return Ok(report);
    }
    // inputs may come from shorter relaxation times than the nominal one
    let mut lp = *lp;
    lp.c_bar = inputs.iter().flatten().fold(lp.c_bar, |m, c| m.max(c.abs()));
    let lp = &lp;
    let mut solver = SolverProvider::new(*lp, mesh, tol, max_iter);
    let (st, sk) = time_source(&mut solver, inputs, warmup)?;
    report.solver = Timing::from_samples(&st);
    if let Some(model) = model {
        let mut op = OperatorProvider::new(model, lp, mesh)?;
        let (ot, ok) = time_source(&mut op, inputs, warmup)?;
        report.operator = Timing::from_samples(&ot);
        report.speedup = Some(report.solver.unwrap().median_ns / report.operator.unwrap().median_ns);
        let (eu, ev): (Vec<f64>, Vec<f64>) =
            sk.iter().zip(&ok).map(|(s, o)| (mean_abs(s.ku(), o.ku()), mean_abs(s.kv(), o.kv()))).unzip();
        let n = eu.len() as f64;
        report.paired = Some(PairedError {
            ku_max: eu.iter().cloned().fold(0.0, f64::max),
            ku_mean: eu.iter().sum::<f64>() / n,
            kv_max: ev.iter().cloned().fold(0.0, f64::max),
            kv_mean: ev.iter().sum::<f64>() / n,
        });
    }
    Ok(report)
}
