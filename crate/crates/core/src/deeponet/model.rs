use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dense::Mlp;
use crate::error::{Error, Result};

/// Layer widths of the branch and trunk networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Number of `c_hat` samples fed to the branch.
    pub m: usize,
    /// Number of basis functions per head.
    pub b: usize,
    pub branch_hidden: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { m: 41, b: 64, branch_hidden: vec![128; 3], trunk_hidden: vec![128; 3] }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 || self.b == 0 || self.branch_hidden.contains(&0) || self.trunk_hidden.contains(&0) {
            return Err(Error::InvalidParams(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }

    fn branch_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.m];
        s.extend(&self.branch_hidden);
        s.push(2 * self.b);
        s
    }

    fn trunk_sizes(&self) -> Vec<usize> {
        let mut s = vec![2];
        s.extend(&self.trunk_hidden);
        s.push(self.b);
        s
    }
}

/// Two-head DeepONet for `c_hat -> (Ku, Kv)`.
///
/// The branch maps `c_hat / c_scale` to `2b` coefficients; the trunk maps the
/// query `(2x - 1, 2xi - 1)` to `b` basis values shared by both heads. Head
/// `h` returns `scale_h * (<g_h, f> + bias_h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepOnet {
    pub(crate) m: usize,
    pub(crate) b: usize,
    pub(crate) c_scale: f64,
    pub(crate) out_scale: [f64; 2],
    pub(crate) out_bias: Array1<f64>,
    pub(crate) branch: Mlp,
    pub(crate) trunk: Mlp,
    /// Hash of the configuration the model was trained under (zero if unknown).
    pub(crate) tag: [u8; 32],
}

/// A training batch in physical units.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `B x m` raw `c_hat` samples.
    pub inputs: Array2<f64>,
    /// `Q x 2` query points `(x, xi)`.
    pub queries: Array2<f64>,
    /// `B x Q` target kernels.
    pub ku: Array2<f64>,
    pub kv: Array2<f64>,
}

pub(crate) fn check_query(x: f64, xi: f64) -> Result<()> {
    const SLACK: f64 = 1e-12;
    if !(x.is_finite() && xi.is_finite()) || xi < -SLACK || x > 1.0 + SLACK || xi > x + SLACK {
        return Err(Error::Domain(format!("query ({x}, {xi}) lies outside 0 <= xi <= x <= 1")));
    }
    Ok(())
}

pub(crate) fn trunk_input(queries: &[(f64, f64)]) -> Array2<f64> {
    Array2::from_shape_fn((queries.len(), 2), |(q, k)| {
        let (x, xi) = queries[q];
        2.0 * if k == 0 { x } else { xi } - 1.0
    })
}

impl DeepOnet {
    /// Glorot-initialized model. `out_bias` starts at zero.
    pub fn new(arch: &Architecture, c_scale: f64, out_scale: [f64; 2], seed: u64) -> Result<Self> {
        arch.validate()?;
        if !(c_scale > 0.0) || out_scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidParams("input and output scales must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let branch = Mlp::xavier(&arch.branch_sizes(), false, &mut rng);
        let trunk = Mlp::xavier(&arch.trunk_sizes(), true, &mut rng);
        Ok(Self {
            m: arch.m,
            b: arch.b,
            c_scale,
            out_scale,
            out_bias: Array1::zeros(2),
            branch,
            trunk,
            tag: [0; 32],
        })
    }

    /// All weights and biases zero, unit scales.
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            m: arch.m,
            b: arch.b,
            c_scale: 1.0,
            out_scale: [1.0; 2],
            out_bias: Array1::zeros(2),
            branch: Mlp::zeros(&arch.branch_sizes(), false),
            trunk: Mlp::zeros(&arch.trunk_sizes(), true),
            tag: [0; 32],
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn b(&self) -> usize {
        self.b
    }

    pub fn c_scale(&self) -> f64 {
        self.c_scale
    }

    pub fn out_scale(&self) -> [f64; 2] {
        self.out_scale
    }

    pub fn tag(&self) -> [u8; 32] {
        self.tag
    }

    pub fn set_tag(&mut self, tag: [u8; 32]) {
        self.tag = tag;
    }

    pub fn architecture(&self) -> Architecture {
        let hidden = |mlp: &Mlp| mlp.layers[..mlp.layers.len() - 1].iter().map(|d| d.w.ncols()).collect();
        Architecture {
            m: self.m,
            b: self.b,
            branch_hidden: hidden(&self.branch),
            trunk_hidden: hidden(&self.trunk),
        }
    }

    pub fn param_count(&self) -> usize {
        self.branch.param_count() + self.trunk.param_count() + 2
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn branch_input(&self, c: &[f64]) -> Result<Array1<f64>> {
        if c.len() != self.m {
            return Err(Error::Shape(format!("branch expects {} samples, got {}", self.m, c.len())));
        }
        Ok(c.iter().map(|v| v / self.c_scale).collect())
    }

    /// Trunk basis values `Q x b` at the given queries.
    pub fn trunk_features(&self, queries: &[(f64, f64)]) -> Result<Array2<f64>> {
        for &(x, xi) in queries {
            check_query(x, xi)?;
        }
        Ok(self.trunk.forward(&trunk_input(queries)))
    }

    /// `(Ku, Kv)` at every query for one `c_hat` sample vector.
    pub fn forward(&self, c: &[f64], queries: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
        let g = self.branch.forward_vec(&self.branch_input(c)?);
        let f = self.trunk_features(queries)?;
        let ku = f.dot(&g.slice(s![..self.b]));
        let kv = f.dot(&g.slice(s![self.b..]));
        let [su, sv] = self.out_scale;
        let (bu, bv) = (self.out_bias[0], self.out_bias[1]);
        Ok(ku.iter().zip(&kv).map(|(u, v)| (su * (u + bu), sv * (v + bv))).collect())
    }

    /// Batched prediction against precomputed trunk features; returns
    /// `B x Q` arrays for both heads in physical units.
    pub fn predict_batch(&self, inputs: ArrayView2<f64>, features: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let g = self.branch.forward(&inputs.mapv(|v| v / self.c_scale));
        let [su, sv] = self.out_scale;
        let mut ku = g.slice(s![.., ..self.b]).dot(&features.t());
        let mut kv = g.slice(s![.., self.b..]).dot(&features.t());
        let (bu, bv) = (self.out_bias[0], self.out_bias[1]);
        ku.mapv_inplace(|v| su * (v + bu));
        kv.mapv_inplace(|v| sv * (v + bv));
        (ku, kv)
    }

    /// Parameter tensors in a fixed order: branch `(w, b)` per layer, trunk
    /// `(w, b)` per layer, then the two head biases.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for mlp in [&self.branch, &self.trunk] {
            for d in &mlp.layers {
                out.push(d.w.as_slice().unwrap());
                out.push(d.b.as_slice().unwrap());
            }
        }
        out.push(self.out_bias.as_slice().unwrap());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for mlp in [&mut self.branch, &mut self.trunk] {
            for d in &mut mlp.layers {
                out.push(d.w.as_slice_mut().unwrap());
                out.push(d.b.as_slice_mut().unwrap());
            }
        }
        out.push(self.out_bias.as_slice_mut().unwrap());
        out
    }

    /// Same shapes and scales, all parameters zero; used as a gradient buffer.
    pub(crate) fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Loss `sum_h ||pred_h / scale_h - target_h / scale_h||^2 / (2 B Q)` and
    /// its gradient with respect to every parameter tensor.
    pub fn loss_and_grad(&self, batch: &Batch) -> (f64, DeepOnet) {
        let (loss, grads, _) = self.loss_and_grad_parts(batch);
        (loss, grads)
    }

    /// As [`DeepOnet::loss_and_grad`], also returning the squared normalized
    /// residual of each head.
    pub(crate) fn loss_and_grad_parts(&self, batch: &Batch) -> (f64, DeepOnet, [f64; 2]) {
        let (nb, nq) = batch.ku.dim();
        let bacts = self.branch.forward_cached(batch.inputs.mapv(|v| v / self.c_scale));
        let tacts = self.trunk.forward_cached(trunk_input_array(&batch.queries));
        let g = bacts.last().unwrap();
        let f = tacts.last().unwrap();
        let gu = g.slice(s![.., ..self.b]);
        let gv = g.slice(s![.., self.b..]);
        let norm = 1.0 / (nb * nq) as f64;

        let residual = |gh: ArrayView2<f64>, target: &Array2<f64>, h: usize| {
            let mut r = gh.dot(&f.t());
            let (bias, scale) = (self.out_bias[h], self.out_scale[h]);
            r.zip_mut_with(target, |p, t| *p += bias - t / scale);
            r
        };
        let mut du = residual(gu, &batch.ku, 0);
        let mut dv = residual(gv, &batch.kv, 1);
        let sq = [du.iter().map(|r| r * r).sum::<f64>(), dv.iter().map(|r| r * r).sum::<f64>()];
        let loss = 0.5 * norm * (sq[0] + sq[1]);
        du.mapv_inplace(|r| r * norm);
        dv.mapv_inplace(|r| r * norm);

        let mut grads = self.zeros_like();
        grads.out_bias[0] = du.sum();
        grads.out_bias[1] = dv.sum();
        let d_g = concatenate(Axis(1), &[du.dot(f).view(), dv.dot(f).view()]).unwrap();
        let d_f = du.t().dot(&gu) + dv.t().dot(&gv);
        self.branch.backward(&bacts, d_g, &mut grads.branch);
        self.trunk.backward(&tacts, d_f, &mut grads.trunk);
        (loss, grads, sq)
    }
}

fn trunk_input_array(queries: &Array2<f64>) -> Array2<f64> {
    queries.mapv(|v| 2.0 * v - 1.0)
}
