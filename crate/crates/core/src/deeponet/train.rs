use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Architecture, Batch, DeepOnet};
use crate::error::{Error, Result};
use crate::grid::resample;
use crate::kernel::{KernelPair, TriMesh};

/// Supervised pairs on one kernel mesh: `c_hat` resampled to `m` points and
/// both kernels flattened in mesh order.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub mesh: TriMesh,
    pub inputs: Array2<f64>,
    pub ku: Array2<f64>,
    pub kv: Array2<f64>,
}

impl TrainingSet {
    pub fn from_pairs<'a, I>(pairs: I, m: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [f64], &'a KernelPair)>,
    {
        let mut mesh = None;
        let (mut inputs, mut ku, mut kv) = (Vec::new(), Vec::new(), Vec::new());
        let mut count = 0;
        for (c, kp) in pairs {
            match mesh {
                None => mesh = Some(kp.mesh()),
                Some(msh) if msh != kp.mesh() => {
                    return Err(Error::Shape("kernel pairs use different meshes".into()));
                }
                _ => {}
            }
            if c.len() < 2 {
                return Err(Error::Shape("c_hat needs at least two samples".into()));
            }
            inputs.extend(resample(c, m));
            ku.extend_from_slice(kp.ku());
            kv.extend_from_slice(kp.kv());
            count += 1;
        }
        let mesh = mesh.ok_or_else(|| Error::InvalidParams("empty training set".into()))?;
        let q = mesh.len();
        let shape = |v: Vec<f64>, cols: usize| Array2::from_shape_vec((count, cols), v).unwrap();
        Ok(Self { mesh, inputs: shape(inputs, m), ku: shape(ku, q), kv: shape(kv, q) })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn m(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn queries(&self) -> Array2<f64> {
        let q = self.mesh.queries();
        Array2::from_shape_fn((q.len(), 2), |(i, k)| if k == 0 { q[i].0 } else { q[i].1 })
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            mesh: self.mesh,
            inputs: self.inputs.select(Axis(0), idx),
            ku: self.ku.select(Axis(0), idx),
            kv: self.kv.select(Axis(0), idx),
        }
    }

    /// Largest `|c_hat|` in the inputs.
    pub fn input_scale(&self) -> f64 {
        self.inputs.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Standard deviation of all `Ku` and of all `Kv` values.
    pub fn output_std(&self) -> [f64; 2] {
        let std = |a: &Array2<f64>| {
            let mean = a.mean().unwrap_or(0.0);
            (a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
        };
        [std(&self.ku), std(&self.kv)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction held out for validation when no validation set is given.
    pub val_fraction: f64,
    pub seed: u64,
    /// Cosine decay of the learning rate down to 1% over the run.
    pub cosine: bool,
    /// Random subset of mesh queries per batch (0 uses the whole mesh).
    pub queries_per_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, batch_size: 256, epochs: 200, val_fraction: 0.1, seed: 0, cosine: true, queries_per_batch: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidParams("lr, batch_size and epochs must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidParams("val_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean squared kernel error over both heads, in kernel units.
    pub train_loss: f64,
    /// `||pred - target|| / ||target||` accumulated over the epoch.
    pub train_rel: f64,
    pub val_rel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_rel: f64,
}

impl TrainReport {
    pub fn final_train_loss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |e| e.train_loss)
    }

    pub fn final_train_rel(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |e| e.train_rel)
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &DeepOnet) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, model: &mut DeepOnet, grads: &DeepOnet, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let grads = grads.tensors();
        for (ti, params) in model.tensors_mut().into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[ti], &mut self.v[ti], grads[ti]);
            for k in 0..params.len() {
                m[k] = Self::B1 * m[k] + (1.0 - Self::B1) * g[k];
                v[k] = Self::B2 * v[k] + (1.0 - Self::B2) * g[k] * g[k];
                params[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

/// `||pred - target|| / ||target||` over a whole set, both heads combined.
pub fn relative_error(model: &DeepOnet, set: &TrainingSet) -> Result<f64> {
    let features = model.trunk_features(&set.mesh.queries())?;
    let (mut num, mut den) = (0.0, 0.0);
    for start in (0..set.len()).step_by(512) {
        let end = (start + 512).min(set.len());
        let (ku, kv) = model.predict_batch(set.inputs.slice(ndarray::s![start..end, ..]), &features);
        for (pred, target) in [(ku, &set.ku), (kv, &set.kv)] {
            let target = target.slice(ndarray::s![start..end, ..]);
            num += pred.iter().zip(target.iter()).map(|(p, t)| (p - t).powi(2)).sum::<f64>();
            den += target.iter().map(|t| t * t).sum::<f64>();
        }
    }
    Ok(if den > 0.0 { (num / den).sqrt() } else { num.sqrt() })
}

/// Trains on `train`, keeping the parameters with the best validation error.
/// Without a validation set a seeded random `val_fraction` of `train` is held out.
pub fn train(
    train: &TrainingSet,
    val: Option<&TrainingSet>,
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<(DeepOnet, TrainReport)> {
    cfg.validate()?;
    arch.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidParams("empty training set".into()));
    }
    if train.m() != arch.m {
        return Err(Error::Shape(format!("inputs have {} samples, architecture expects {}", train.m(), arch.m)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train_set, val_set) = match val {
        Some(v) => {
            if v.mesh != train.mesh || v.m() != train.m() {
                return Err(Error::Shape("validation set shape differs from training set".into()));
            }
            (train.clone(), v.clone())
        }
        None if train.len() == 1 => (train.clone(), train.clone()),
        None => {
            let mut idx: Vec<usize> = (0..train.len()).collect();
            idx.shuffle(&mut rng);
            let n_val = ((train.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, train.len() - 1);
            let (v, t) = idx.split_at(n_val);
            (train.select(t), train.select(v))
        }
    };

    let c_scale = match train_set.input_scale() {
        s if s > 0.0 => s,
        _ => 1.0,
    };
    let out_scale = train_set.output_std().map(|s| if s > 0.0 { s } else { 1.0 });
    let mut model = DeepOnet::new(arch, c_scale, out_scale, rng.next_seed())?;
    model.out_bias[0] = train_set.ku.mean().unwrap() / out_scale[0];
    model.out_bias[1] = train_set.kv.mean().unwrap() / out_scale[1];

    let queries = train_set.queries();
    let n_query = queries.nrows();
    let mut adam = Adam::new(&model);
    let mut best = (model.clone(), f64::INFINITY, 0);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut query_order: Vec<usize> = (0..n_query).collect();
    let total_steps = cfg.epochs * train_set.len().div_ceil(cfg.batch_size);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sq_sum, mut count, mut den) = (0.0, 0usize, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let q_idx: Vec<usize> = if cfg.queries_per_batch == 0 || cfg.queries_per_batch >= n_query {
                (0..n_query).collect()
            } else {
                query_order.shuffle(&mut rng);
                query_order[..cfg.queries_per_batch].to_vec()
            };
            let batch = Batch {
                inputs: train_set.inputs.select(Axis(0), chunk),
                queries: queries.select(Axis(0), &q_idx),
                ku: train_set.ku.select(Axis(0), chunk).select(Axis(1), &q_idx),
                kv: train_set.kv.select(Axis(0), chunk).select(Axis(1), &q_idx),
            };
            let (loss, grads, [sq_u, sq_v]) = model.loss_and_grad_parts(&batch);
            if !loss.is_finite() {
                return Err(Error::Instability { t: epoch as f64 });
            }
            let [su, sv] = model.out_scale;
            sq_sum += su * su * sq_u + sv * sv * sq_v;
            count += 2 * batch.ku.len();
            den += batch.ku.iter().chain(batch.kv.iter()).map(|t| t * t).sum::<f64>();

            let lr = if cfg.cosine {
                let frac = step as f64 / total_steps.max(1) as f64;
                cfg.lr * (0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
            } else {
                cfg.lr
            };
            adam.step(&mut model, &grads, lr);
            step += 1;
        }
        let val_rel = relative_error(&model, &val_set)?;
        let stats = EpochStats {
            epoch,
            train_loss: sq_sum / count as f64,
            train_rel: if den > 0.0 { (sq_sum / den).sqrt() } else { sq_sum.sqrt() },
            val_rel,
        };
        log::debug!("epoch {epoch}: loss {:.3e}, train rel {:.3e}, val rel {:.3e}", stats.train_loss, stats.train_rel, val_rel);
        if val_rel < best.1 {
            best = (model.clone(), val_rel, epoch);
        }
        history.push(stats);
    }
    let (model, best_val_rel, best_epoch) = best;
    Ok((model, TrainReport { history, best_epoch, best_val_rel }))
}

trait NextSeed {
    fn next_seed(&mut self) -> u64;
}

impl NextSeed for ChaCha8Rng {
    fn next_seed(&mut self) -> u64 {
        rand::Rng::random(self)
    }
}
