use ndarray::{s, Array2};

use super::dense::Mlp;
use super::model::DeepOnet;
use crate::error::Result;
use crate::grid::resample;
use crate::kernel::{KernelMeta, KernelPair, TriMesh};

/// A trained operator bound to one kernel mesh.
///
/// The trunk only depends on the query points, so its basis values on the
/// mesh are computed once; each kernel acquisition is then one branch pass
/// and two matrix-vector products.
#[derive(Debug, Clone)]
pub struct PreparedOperator {
    branch: Mlp,
    m: usize,
    b: usize,
    c_scale: f64,
    out_scale: [f64; 2],
    out_bias: [f64; 2],
    features: Array2<f64>,
    mesh: TriMesh,
    meta: KernelMeta,
}

impl PreparedOperator {
    pub fn new(model: &DeepOnet, mesh: TriMesh, meta: KernelMeta) -> Result<Self> {
        Ok(Self {
            branch: model.branch.clone(),
            m: model.m,
            b: model.b,
            c_scale: model.c_scale,
            out_scale: model.out_scale,
            out_bias: [model.out_bias[0], model.out_bias[1]],
            features: model.trunk_features(&mesh.queries())?,
            mesh,
            meta,
        })
    }

    pub fn mesh(&self) -> TriMesh {
        self.mesh
    }

    /// Kernels for `c_hat` given on any uniform grid over `[0, 1]`.
    pub fn kernels(&self, c_hat: &[f64]) -> Result<KernelPair> {
        let input: ndarray::Array1<f64> = resample(c_hat, self.m).into_iter().map(|v| v / self.c_scale).collect();
        let g = self.branch.forward_vec(&input);
        let head = |h: usize, coeffs: ndarray::ArrayView1<f64>| -> Vec<f64> {
            let (scale, bias) = (self.out_scale[h], self.out_bias[h]);
            self.features.dot(&coeffs).into_iter().map(|v| scale * (v + bias)).collect()
        };
        let ku = head(0, g.slice(s![..self.b]));
        let kv = head(1, g.slice(s![self.b..]));
        KernelPair::new(self.mesh, self.meta, ku, kv)
    }
}
