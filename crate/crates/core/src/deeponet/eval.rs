use std::fmt;

use serde::Serialize;

use super::model::DeepOnet;
use super::train::TrainingSet;
use crate::error::Result;

/// Per-sample mean absolute kernel error, summarized by its maximum and mean
/// over the evaluated samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelErrors {
    pub ku_max: f64,
    pub ku_mean: f64,
    pub kv_max: f64,
    pub kv_mean: f64,
    pub samples: usize,
}

/// Evaluates an arbitrary predictor returning `(Ku, Kv)` in mesh order for
/// sample `i` with inputs `c`.
pub fn eval_predictions<F>(set: &TrainingSet, mut predict: F) -> Result<KernelErrors>
where
    F: FnMut(usize, &[f64]) -> Result<(Vec<f64>, Vec<f64>)>,
{
    let mut e = KernelErrors { ku_max: 0.0, ku_mean: 0.0, kv_max: 0.0, kv_mean: 0.0, samples: set.len() };
    for i in 0..set.len() {
        let c = set.inputs.row(i).to_vec();
        let (pu, pv) = predict(i, &c)?;
        let mae = |p: &[f64], t: ndarray::ArrayView1<f64>| {
            p.iter().zip(t.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64
        };
        let (eu, ev) = (mae(&pu, set.ku.row(i)), mae(&pv, set.kv.row(i)));
        e.ku_max = e.ku_max.max(eu);
        e.kv_max = e.kv_max.max(ev);
        e.ku_mean += eu;
        e.kv_mean += ev;
    }
    if set.len() > 0 {
        e.ku_mean /= set.len() as f64;
        e.kv_mean /= set.len() as f64;
    }
    Ok(e)
}

pub fn eval_accuracy(model: &DeepOnet, set: &TrainingSet) -> Result<KernelErrors> {
    let features = model.trunk_features(&set.mesh.queries())?;
    let (ku, kv) = model.predict_batch(set.inputs.view(), &features);
    eval_predictions(set, |i, _| Ok((ku.row(i).to_vec(), kv.row(i).to_vec())))
}

/// Maximum and mean over time of the closed-loop state gaps between the
/// operator-driven and the solver-driven run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StateErrors {
    pub density_max: f64,
    pub density_mean: f64,
    pub speed_max: f64,
    pub speed_mean: f64,
}

impl StateErrors {
    /// Summary of `(t, density gap, speed gap)` samples, pooled over runs.
    pub fn from_gaps(gaps: &[(f64, f64, f64)]) -> Option<Self> {
        if gaps.is_empty() {
            return None;
        }
        let n = gaps.len() as f64;
        Some(Self {
            density_max: gaps.iter().map(|g| g.1).fold(0.0, f64::max),
            density_mean: gaps.iter().map(|g| g.1).sum::<f64>() / n,
            speed_max: gaps.iter().map(|g| g.2).fold(0.0, f64::max),
            speed_mean: gaps.iter().map(|g| g.2).sum::<f64>() / n,
        })
    }
}

/// Kernel and traffic-state errors in the layout of the results table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Table1 {
    pub kernels: KernelErrors,
    pub states: Option<StateErrors>,
}

impl fmt::Display for Table1 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = &self.kernels;
        let (dmax, dmean, smax, smean) = match self.states {
            Some(s) => (
                format!("{:.3e}", s.density_max),
                format!("{:.3e}", s.density_mean),
                format!("{:.3e}", s.speed_max),
                format!("{:.3e}", s.speed_mean),
            ),
            None => ("n/a".into(), "n/a".into(), "n/a".into(), "n/a".into()),
        };
        writeln!(f, "{:<6} {:>12} {:>12} {:>12} {:>12}", "", "kernel Ku", "kernel Kv", "density", "speed")?;
        writeln!(f, "{:<6} {:>12.3e} {:>12.3e} {:>12} {:>12}", "max", k.ku_max, k.kv_max, dmax, smax)?;
        write!(f, "{:<6} {:>12.3e} {:>12.3e} {:>12} {:>12}", "mean", k.ku_mean, k.kv_mean, dmean, smean)
    }
}
