//! Fully connected tanh networks with explicit backpropagation.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in x out`, so a batch `X` (rows are samples) maps to `X W + b`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { w: Array2::zeros((n_in, n_out)), b: Array1::zeros(n_out) }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn xavier<R: Rng>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (n_in + n_out) as f64).sqrt();
        let w = Array2::from_shape_simple_fn((n_in, n_out), || rng.random_range(-limit..limit));
        Self { w, b: Array1::zeros(n_out) }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.w.dim()
    }
}

/// Dense layers with tanh after every hidden layer and optionally after the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub tanh_last: bool,
}

impl Mlp {
    /// `sizes` lists the widths from input to output.
    pub fn xavier<R: Rng>(sizes: &[usize], tanh_last: bool, rng: &mut R) -> Self {
        let layers = sizes.windows(2).map(|w| Dense::xavier(w[0], w[1], rng)).collect();
        Self { layers, tanh_last }
    }

    pub fn zeros(sizes: &[usize], tanh_last: bool) -> Self {
        let layers = sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Self { layers, tanh_last }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().w.ncols()
    }

    fn activated(&self, l: usize) -> bool {
        l + 1 < self.layers.len() || self.tanh_last
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            a = a.dot(&layer.w) + &layer.b;
            if self.activated(l) {
                a.mapv_inplace(f64::tanh);
            }
        }
        a
    }

    pub fn forward_vec(&self, x: &Array1<f64>) -> Array1<f64> {
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            a = a.dot(&layer.w) + &layer.b;
            if self.activated(l) {
                a.mapv_inplace(f64::tanh);
            }
        }
        a
    }

    /// Forward pass keeping every activation; `acts[0]` is the input and the
    /// last entry the output.
    pub fn forward_cached(&self, x: Array2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = acts[l].dot(&layer.w) + &layer.b;
            if self.activated(l) {
                a.mapv_inplace(f64::tanh);
            }
            acts.push(a);
        }
        acts
    }

    /// Accumulates parameter gradients into `grads` given `d_out`, the loss
    /// gradient with respect to the output.
    pub fn backward(&self, acts: &[Array2<f64>], d_out: Array2<f64>, grads: &mut Mlp) {
        let mut d = d_out;
        for l in (0..self.layers.len()).rev() {
            if self.activated(l) {
                d.zip_mut_with(&acts[l + 1], |g, a| *g *= 1.0 - a * a);
            }
            grads.layers[l].w += &acts[l].t().dot(&d);
            grads.layers[l].b += &d.sum_axis(Axis(0));
            if l > 0 {
                d = d.dot(&self.layers[l].w.t());
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|d| d.w.len() + d.b.len()).sum()
    }
}
