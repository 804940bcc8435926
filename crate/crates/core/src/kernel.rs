//! Goursat kernel equations of the adaptive backstepping transform
//!
//! ```text
//! mu Ku_x = lambda Ku_xi + c_hat(xi) Kv,     mu Kv_x = -mu Kv_xi,
//! Ku(x, x) = -c_hat(x) / (lambda + mu),     Kv(x, 0) = (lambda r / mu) Ku(x, 0)
//! ```
//!
//! on the triangle `0 <= xi <= x <= 1`, solved for a frozen estimate `c_hat`.
//!
//! `Ku` is integrated along its characteristics (direction `(mu, -lambda)`)
//! starting from the diagonal. `Kv` is transported unchanged along
//! `x - xi = const` from the bottom edge, so it is fully determined by the
//! edge trace of `Ku`. The coupling is resolved by successive approximation
//! starting from `Kv = 0`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::grid::interp_uniform;
use crate::model::LinearizedParams;

/// Node set `{(x_i, xi_j) : 0 <= j <= i < n}` with `x_i = i / (n - 1)`,
/// stored row by row (`x` major).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TriMesh {
    n: usize,
}

impl TriMesh {
    pub fn new(n: usize) -> Result<Self> {
        if n < 8 {
            return Err(Error::InvalidParams(format!("triangle mesh needs n >= 8 nodes per side, got {n}")));
        }
        Ok(Self { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        1.0 / (self.n - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.n * (self.n + 1) / 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i < self.n);
        i * (i + 1) / 2 + j
    }

    /// All `(x, xi)` nodes in storage order.
    pub fn queries(&self) -> Vec<(f64, f64)> {
        let h = self.h();
        (0..self.n)
            .flat_map(|i| (0..=i).map(move |j| (i as f64 * h, j as f64 * h)))
            .collect()
    }

    /// Trapezoid weight of node `j` in `int_0^{x_i} f(xi) d xi`.
    #[inline]
    pub fn row_weight(&self, i: usize, j: usize) -> f64 {
        if i == 0 {
            0.0
        } else if j == 0 || j == i {
            0.5 * self.h()
        } else {
            self.h()
        }
    }
}

/// Linear interpolation of a field stored on a [`TriMesh`]; bilinear in
/// interior squares and linear on the half-squares along the diagonal.
pub fn interp_tri(values: &[f64], n: usize, x: f64, xi: f64) -> f64 {
    let scale = (n - 1) as f64;
    let sx = x.clamp(0.0, 1.0) * scale;
    let sy = xi.clamp(0.0, 1.0).min(x) * scale;
    let i0 = (sx.floor() as usize).min(n - 2);
    let j0 = (sy.floor() as usize).min(i0);
    let tx = sx - i0 as f64;
    let ty = sy - j0 as f64;
    let at = |i: usize, j: usize| values[i * (i + 1) / 2 + j];
    if j0 < i0 {
        let a = at(i0, j0);
        let b = at(i0 + 1, j0);
        let c = at(i0, j0 + 1);
        let d = at(i0 + 1, j0 + 1);
        (1.0 - tx) * ((1.0 - ty) * a + ty * c) + tx * ((1.0 - ty) * b + ty * d)
    } else {
        let a = at(i0, i0);
        let b = at(i0 + 1, i0);
        let c = at(i0 + 1, i0 + 1);
        a + tx * (b - a) + ty * (c - b)
    }
}

/// Transport data the kernels were solved for (normalized speeds).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelMeta {
    pub lambda: f64,
    pub mu: f64,
    pub r: f64,
}

impl KernelMeta {
    pub fn from_params(lp: &LinearizedParams) -> Self {
        let (lambda, mu) = lp.speeds();
        Self { lambda, mu, r: lp.r }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelPair {
    mesh: TriMesh,
    meta: KernelMeta,
    ku: Vec<f64>,
    kv: Vec<f64>,
}

impl KernelPair {
    pub fn new(mesh: TriMesh, meta: KernelMeta, ku: Vec<f64>, kv: Vec<f64>) -> Result<Self> {
        if ku.len() != mesh.len() || kv.len() != mesh.len() {
            return Err(Error::Shape(format!(
                "kernel arrays have {} / {} values, mesh has {}",
                ku.len(),
                kv.len(),
                mesh.len()
            )));
        }
        Ok(Self { mesh, meta, ku, kv })
    }

    pub fn zeros(mesh: TriMesh, meta: KernelMeta) -> Self {
        Self { mesh, meta, ku: vec![0.0; mesh.len()], kv: vec![0.0; mesh.len()] }
    }

    pub fn mesh(&self) -> TriMesh {
        self.mesh
    }

    pub fn meta(&self) -> KernelMeta {
        self.meta
    }

    pub fn ku(&self) -> &[f64] {
        &self.ku
    }

    pub fn kv(&self) -> &[f64] {
        &self.kv
    }

    pub fn ku_at(&self, i: usize, j: usize) -> f64 {
        self.ku[self.mesh.index(i, j)]
    }

    pub fn kv_at(&self, i: usize, j: usize) -> f64 {
        self.kv[self.mesh.index(i, j)]
    }

    /// Interpolated `(Ku, Kv)` at an arbitrary point of the triangle.
    pub fn eval(&self, x: f64, xi: f64) -> (f64, f64) {
        let n = self.mesh.n;
        (interp_tri(&self.ku, n, x, xi), interp_tri(&self.kv, n, x, xi))
    }

    /// Interpolates both kernels onto a mesh with `n` nodes per side.
    pub fn resample(&self, n: usize) -> Result<Self> {
        if n == self.mesh.n {
            return Ok(self.clone());
        }
        let mesh = TriMesh::new(n)?;
        let (ku, kv) = mesh.queries().into_iter().map(|(x, xi)| self.eval(x, xi)).unzip();
        Self::new(mesh, self.meta, ku, kv)
    }

    pub fn sup_norms(&self) -> (f64, f64) {
        let sup = |f: &[f64]| f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        (sup(&self.ku), sup(&self.kv))
    }

    /// Mean-square L2 norm over the triangle, `(int int Ku^2 + Kv^2)^{1/2}`,
    /// approximated by a node average scaled by the triangle area.
    pub fn l2_norm(&self) -> f64 {
        let sum: f64 = self.ku.iter().chain(&self.kv).map(|v| v * v).sum();
        (0.5 * sum / self.mesh.len() as f64).sqrt()
    }

    pub fn within_bound(&self, k_bar: f64) -> bool {
        let (a, b) = self.sup_norms();
        a <= k_bar && b <= k_bar
    }

    /// Flat binary record: `n` (u64), `lambda`, `mu`, `r`, then all `Ku`
    /// values followed by all `Kv` values in mesh storage order. Little-endian.
    pub fn write_record<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.mesh.n as u64).to_le_bytes())?;
        for v in [self.meta.lambda, self.meta.mu, self.meta.r] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(16 * self.ku.len());
        for v in self.ku.iter().chain(&self.kv) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_record<R: Read>(r: &mut R) -> Result<Self> {
        let n = read_u64(r)? as usize;
        if !(8..=100_000).contains(&n) {
            return Err(Error::Format(format!("implausible kernel mesh size {n}")));
        }
        let meta = KernelMeta { lambda: read_f64(r)?, mu: read_f64(r)?, r: read_f64(r)? };
        let mesh = TriMesh::new(n)?;
        let ku = read_f64s(r, mesh.len())?;
        let kv = read_f64s(r, mesh.len())?;
        Self::new(mesh, meta, ku, kv)
    }

    pub fn record_len(n: usize) -> usize {
        8 + 24 + 16 * n * (n + 1) / 2
    }
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; 8 * count];
    r.read_exact(&mut bytes).map_err(truncated)?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("unexpected end of data".into())
    } else {
        Error::Io(e)
    }
}

/// A-priori cap `10 c_bar / (lambda + mu) e^{c_bar}` on the kernel sup norms.
pub fn default_kernel_bound(lp: &LinearizedParams) -> f64 {
    let (lambda, mu) = lp.speeds();
    10.0 * lp.c_bar / (lambda + mu) * lp.c_bar.exp()
}

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 200;

/// Solves the kernel equations for `c_hat` sampled on the mesh nodes.
pub fn solve_kernels(
    c_hat: &[f64],
    lp: &LinearizedParams,
    mesh: &TriMesh,
    tol: f64,
    max_iter: usize,
) -> Result<KernelPair> {
    let n = mesh.n();
    if c_hat.len() != n {
        return Err(Error::Shape(format!("c_hat has {} samples, mesh has {n} nodes per side", c_hat.len())));
    }
    let bound = lp.c_bar * (1.0 + 1e-12);
    if let Some(c) = c_hat.iter().find(|c| !(c.abs() <= bound)) {
        return Err(Error::Domain(format!("|c_hat| = {} exceeds c_bar = {}", c.abs(), lp.c_bar)));
    }
    let meta = KernelMeta::from_params(lp);
    let KernelMeta { lambda, mu, r } = meta;
    if !(lambda > 0.0 && mu > 0.0) {
        return Err(Error::InvalidParams("transport speeds must be positive".into()));
    }
    let speed = lambda + mu;
    let edge_gain = lambda * r / mu;
    let h = mesh.h();

    // Quadrature points along each characteristic, two per mesh cell crossed.
    // Each entry carries the point and the trapezoid-weighted c_hat value.
    let mut paths: Vec<(f64, f64, f64)> = Vec::new();
    let mut path_start = Vec::with_capacity(mesh.len() + 1);
    let mut diag = Vec::with_capacity(mesh.len());
    for i in 0..n {
        for j in 0..=i {
            let (x, xi) = (i as f64 * h, j as f64 * h);
            let s0 = (lambda * x + mu * xi) / speed;
            let c0 = if i == j { c_hat[i] } else { interp_uniform(c_hat, s0) };
            diag.push(-c0 / speed);
            path_start.push(paths.len());
            if i == j {
                continue;
            }
            let steps = 2 * (i - j);
            let dsigma = (x - xi) / speed / steps as f64;
            for k in 0..=steps {
                let sigma = k as f64 * dsigma;
                let px = s0 + mu * sigma;
                let pxi = s0 - lambda * sigma;
                let w = if k == 0 || k == steps { 0.5 * dsigma } else { dsigma };
                paths.push((px, pxi, w * interp_uniform(c_hat, pxi)));
            }
        }
    }
    path_start.push(paths.len());

    let mut ku = vec![0.0; mesh.len()];
    let mut kv = vec![0.0; mesh.len()];
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let mut change = 0.0f64;
        let mut ku_next = vec![0.0; mesh.len()];
        for (idx, next) in ku_next.iter_mut().enumerate() {
            let integral: f64 = paths[path_start[idx]..path_start[idx + 1]]
                .iter()
                .map(|&(px, pxi, wc)| wc * interp_tri(&kv, n, px, pxi))
                .sum();
            *next = diag[idx] + integral;
            change = change.max((*next - ku[idx]).abs());
        }
        for i in 0..n {
            for j in 0..=i {
                let idx = mesh.index(i, j);
                let value = edge_gain * ku_next[mesh.index(i - j, 0)];
                change = change.max((value - kv[idx]).abs());
                kv[idx] = value;
            }
        }
        ku = ku_next;
        residual = change;
        if !residual.is_finite() {
            break;
        }
        if residual < tol {
            return KernelPair::new(*mesh, meta, ku, kv);
        }
    }
    Err(Error::NoConvergence { iterations: max_iter, residual })
}

/// Inverse-transform kernels `(Lu, Lv)`, stored on the same mesh.
///
/// They are the resolvent of the trapezoid-discretized transform, so
/// `apply_inverse(apply_transform(.))` is the identity up to the iteration
/// tolerance rather than up to quadrature error.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseKernelPair {
    mesh: TriMesh,
    lu: Vec<f64>,
    lv: Vec<f64>,
}

impl InverseKernelPair {
    pub fn mesh(&self) -> TriMesh {
        self.mesh
    }

    pub fn lu(&self) -> &[f64] {
        &self.lu
    }

    pub fn lv(&self) -> &[f64] {
        &self.lv
    }

    pub fn sup_norms(&self) -> (f64, f64) {
        let sup = |f: &[f64]| f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        (sup(&self.lu), sup(&self.lv))
    }

    pub fn within_bound(&self, l_bar: f64) -> bool {
        let (a, b) = self.sup_norms();
        a <= l_bar && b <= l_bar
    }
}

/// Computes the inverse kernels by successive approximation of the resolvent
/// equation `R = A + A R` for the discretized `Kv` operator `A`.
pub fn solve_inverse_kernels(kp: &KernelPair, tol: f64, max_iter: usize) -> Result<InverseKernelPair> {
    let mesh = kp.mesh;
    let n = mesh.n;
    let dense = |k: &[f64]| {
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                a[i * n + j] = mesh.row_weight(i, j) * k[mesh.index(i, j)];
            }
        }
        a
    };
    let a_v = dense(&kp.kv);
    let a_u = dense(&kp.ku);

    // lower-triangular product (P Q)[i][j] = sum_{k=j..i} P[i][k] Q[k][j]
    let lower_mul = |p: &[f64], q: &[f64]| {
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                out[i * n + j] = (j..=i).map(|k| p[i * n + k] * q[k * n + j]).sum();
            }
        }
        out
    };

    let mut res = a_v.clone();
    let mut converged = false;
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let prod = lower_mul(&a_v, &res);
        let mut change = 0.0f64;
        for idx in 0..n * n {
            let value = a_v[idx] + prod[idx];
            change = change.max((value - res[idx]).abs());
            res[idx] = value;
        }
        residual = change;
        if !residual.is_finite() {
            break;
        }
        if residual < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { iterations: max_iter, residual });
    }
    let mut y = lower_mul(&res, &a_u);
    for (yi, ai) in y.iter_mut().zip(&a_u) {
        *yi += ai;
    }

    let mut lu = vec![0.0; mesh.len()];
    let mut lv = vec![0.0; mesh.len()];
    // the resolvent agrees with the kernel on the diagonal; row 0 has no quadrature weight
    lu[0] = kp.ku[0];
    lv[0] = kp.kv[0];
    for i in 1..n {
        for j in 0..=i {
            let w = mesh.row_weight(i, j);
            lu[mesh.index(i, j)] = y[i * n + j] / w;
            lv[mesh.index(i, j)] = res[i * n + j] / w;
        }
    }
    Ok(InverseKernelPair { mesh, lu, lv })
}

fn volterra(mesh: &TriMesh, k: &[f64], f: &[f64], i: usize) -> f64 {
    (0..=i).map(|j| mesh.row_weight(i, j) * k[mesh.index(i, j)] * f[j]).sum()
}

/// `z = v - int_0^x Ku u - int_0^x Kv v` on the mesh nodes.
pub fn apply_transform(kp: &KernelPair, u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let mesh = kp.mesh;
    check_fields(mesh, &[u, v])?;
    Ok((0..mesh.n)
        .map(|i| v[i] - volterra(&mesh, &kp.ku, u, i) - volterra(&mesh, &kp.kv, v, i))
        .collect())
}

/// `v = z + int_0^x Lu w + int_0^x Lv z` on the mesh nodes.
pub fn apply_inverse(inv: &InverseKernelPair, w: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    let mesh = inv.mesh;
    check_fields(mesh, &[w, z])?;
    Ok((0..mesh.n)
        .map(|i| z[i] + volterra(&mesh, &inv.lu, w, i) + volterra(&mesh, &inv.lv, z, i))
        .collect())
}

fn check_fields(mesh: TriMesh, fields: &[&[f64]]) -> Result<()> {
    if fields.iter().any(|f| f.len() != mesh.n) {
        return Err(Error::Shape(format!("fields must have {} nodes", mesh.n)));
    }
    Ok(())
}

/// Finite-difference time derivative `(now - prev) / dt` of two kernel solves.
pub fn kernel_time_derivative(prev: &KernelPair, now: &KernelPair, dt: f64) -> Result<KernelPair> {
    if prev.mesh != now.mesh {
        return Err(Error::Shape(format!(
            "kernel meshes differ ({} vs {} nodes per side)",
            prev.mesh.n, now.mesh.n
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidParams("dt must be positive".into()));
    }
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (q - p) / dt).collect();
    Ok(KernelPair {
        mesh: now.mesh,
        meta: now.meta,
        ku: diff(&prev.ku, &now.ku),
        kv: diff(&prev.kv, &now.kv),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::uniform_nodes;
    use crate::model::{derive_linearized, true_c_sampler, TrafficParams};

    fn params() -> LinearizedParams {
        derive_linearized(&TrafficParams::reference()).unwrap()
    }

    fn reference_kernels(n: usize) -> KernelPair {
        let lp = params();
        let mesh = TriMesh::new(n).unwrap();
        let c = true_c_sampler(&lp, &uniform_nodes(n));
        solve_kernels(&c, &lp, &mesh, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap()
    }

    #[test]
    fn mesh_layout() {
        let mesh = TriMesh::new(41).unwrap();
        assert_eq!(mesh.len(), 861);
        assert_eq!(mesh.queries().len(), 861);
        assert_eq!(mesh.index(40, 40), 860);
        assert!(TriMesh::new(7).is_err());
        let q = mesh.queries();
        assert!(q.iter().any(|&(x, xi)| x == 1.0 && xi == 0.0));
        assert!(q.iter().all(|&(x, xi)| xi <= x));
    }

    #[test]
    fn interpolation_reproduces_linear_fields() {
        let mesh = TriMesh::new(9).unwrap();
        let f: Vec<f64> = mesh.queries().iter().map(|&(x, xi)| 2.0 * x - 3.0 * xi + 0.5).collect();
        for &(x, xi) in &[(0.3, 0.1), (0.55, 0.55), (1.0, 0.0), (0.77, 0.7), (0.9, 0.33)] {
            assert!((interp_tri(&f, 9, x, xi) - (2.0 * x - 3.0 * xi + 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_estimate_gives_zero_kernels() {
        let lp = params();
        let mesh = TriMesh::new(21).unwrap();
        let kp = solve_kernels(&vec![0.0; 21], &lp, &mesh, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        assert!(kp.ku().iter().chain(kp.kv()).all(|&k| k == 0.0));
    }

    #[test]
    fn boundary_conditions_hold_by_construction() {
        let lp = params();
        let (lambda, mu) = lp.speeds();
        let mesh = TriMesh::new(21).unwrap();
        let c = -0.01;
        let kp = solve_kernels(&vec![c; 21], &lp, &mesh, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        for i in 0..21 {
            assert_eq!(kp.ku_at(i, i), -c / (lambda + mu));
            assert_eq!(kp.kv_at(i, 0), lambda * lp.r / mu * kp.ku_at(i, 0));
        }
        let kp = reference_kernels(21);
        let c = true_c_sampler(&lp, &uniform_nodes(21));
        for i in 0..21 {
            assert_eq!(kp.ku_at(i, i), -c[i] / (lambda + mu));
        }
    }

    #[test]
    fn kv_is_constant_along_diagonals() {
        let kp = reference_kernels(31);
        for d in 0..31 {
            for j in 0..31 - d {
                assert!((kp.kv_at(d + j, j) - kp.kv_at(d, 0)).abs() <= DEFAULT_TOL);
            }
        }
    }

    #[test]
    fn satisfies_characteristic_pde_in_interior() {
        // mu Ku_x - lambda Ku_xi - c Kv ~ 0, checked with central differences
        let lp = params();
        let (lambda, mu) = lp.speeds();
        let n = 81;
        let kp = reference_kernels(n);
        let h = 1.0 / (n - 1) as f64;
        let mut worst = 0.0f64;
        for i in 10..n - 2 {
            for j in 2..i - 2 {
                let ku_x = (kp.ku_at(i + 1, j) - kp.ku_at(i - 1, j)) / (2.0 * h);
                let ku_xi = (kp.ku_at(i, j + 1) - kp.ku_at(i, j - 1)) / (2.0 * h);
                let res = mu * ku_x - lambda * ku_xi - lp.c_true(j as f64 * h) * kp.kv_at(i, j);
                worst = worst.max(res.abs());
            }
        }
        let scale = lp.c_bar * kp.sup_norms().1;
        assert!(worst < 1e-2 * scale, "residual {worst} vs source scale {scale}");
    }

    #[test]
    fn richardson_check_against_four_times_finer_mesh() {
        let coarse = reference_kernels(41);
        let fine = reference_kernels(161);
        let mut diff = 0.0f64;
        for i in 0..41 {
            for j in 0..=i {
                diff = diff.max((coarse.ku_at(i, j) - fine.ku_at(4 * i, 4 * j)).abs());
                diff = diff.max((coarse.kv_at(i, j) - fine.kv_at(4 * i, 4 * j)).abs());
            }
        }
        let (sup_u, _) = fine.sup_norms();
        assert!(diff <= 1e-3 * sup_u, "discrepancy {diff}, sup {sup_u}");
    }

    fn self_convergence_error(n: usize) -> f64 {
        let coarse = reference_kernels(n);
        let fine = reference_kernels(2 * n - 1);
        let mut diff = 0.0f64;
        for i in 0..n {
            for j in 0..=i {
                diff = diff.max((coarse.ku_at(i, j) - fine.ku_at(2 * i, 2 * j)).abs());
            }
        }
        diff
    }

    #[test]
    fn mesh_refinement_order() {
        let e1 = self_convergence_error(21);
        let e2 = self_convergence_error(41);
        let e3 = self_convergence_error(81);
        assert!(e1 / e2 >= 1.8, "ratio {}", e1 / e2);
        assert!(e2 / e3 >= 1.8, "ratio {}", e2 / e3);
    }

    #[test]
    fn kernels_respect_default_bound() {
        let kp = reference_kernels(41);
        assert!(kp.within_bound(default_kernel_bound(&params())));
    }

    #[test]
    fn solver_errors() {
        let lp = params();
        let mesh = TriMesh::new(11).unwrap();
        assert!(matches!(
            solve_kernels(&vec![-0.5; 11], &lp, &mesh, 1e-8, 200),
            Err(Error::Domain(_))
        ));
        assert!(matches!(solve_kernels(&vec![0.0; 10], &lp, &mesh, 1e-8, 200), Err(Error::Shape(_))));
        let c = true_c_sampler(&lp, &uniform_nodes(11));
        match solve_kernels(&c, &lp, &mesh, 1e-14, 2) {
            Err(Error::NoConvergence { iterations, residual }) => {
                assert_eq!(iterations, 2);
                assert!(residual > 0.0);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn inverse_of_zero_kernels_is_zero() {
        let mesh = TriMesh::new(16).unwrap();
        let kp = KernelPair::zeros(mesh, KernelMeta::from_params(&params()));
        let inv = solve_inverse_kernels(&kp, 1e-12, 100).unwrap();
        assert!(inv.lu().iter().chain(inv.lv()).all(|&l| l == 0.0));
    }

    #[test]
    fn transform_round_trip_is_identity() {
        let n = 128;
        let kp = reference_kernels(n);
        let inv = solve_inverse_kernels(&kp, 1e-14, 200).unwrap();
        let xs = uniform_nodes(n);
        let u: Vec<f64> = xs.iter().map(|&x| (2.0 * x).sin() + 0.3 * (7.0 * x).cos()).collect();
        let v: Vec<f64> = xs.iter().map(|&x| x * x - 0.4 * (5.0 * x).sin()).collect();
        let z = apply_transform(&kp, &u, &v).unwrap();
        let back = apply_inverse(&inv, &u, &z).unwrap();
        let err: f64 = back.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let size: f64 = u.iter().chain(&v).map(|a| a * a).sum::<f64>().sqrt();
        assert!(err <= 1e-6 * size, "round trip error {err}");
        let (lu, lv) = inv.sup_norms();
        assert!(lu.is_finite() && lv.is_finite());
        assert!(inv.within_bound(default_kernel_bound(&params())));
    }

    #[test]
    fn time_derivative() {
        let kp = reference_kernels(21);
        let d = kernel_time_derivative(&kp, &kp, 0.1).unwrap();
        assert!(d.ku().iter().chain(d.kv()).all(|&k| k == 0.0));
        let other = reference_kernels(11);
        assert!(matches!(kernel_time_derivative(&kp, &other, 0.1), Err(Error::Shape(_))));
    }

    #[test]
    fn record_round_trip_and_truncation() {
        let kp = reference_kernels(11);
        let mut buf = Vec::new();
        kp.write_record(&mut buf).unwrap();
        assert_eq!(buf.len(), KernelPair::record_len(11));
        let back = KernelPair::read_record(&mut buf.as_slice()).unwrap();
        assert_eq!(back, kp);
        let cut = &buf[..buf.len() - 5];
        assert!(matches!(KernelPair::read_record(&mut &cut[..]), Err(Error::Format(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn diagonal_scales_with_estimate(s in 0.0..1.0f64, tau in 50.0..70.0f64) {
                let lp = derive_linearized(&TrafficParams::reference().with_tau(tau).unwrap()).unwrap();
                let mesh = TriMesh::new(17).unwrap();
                let c = true_c_sampler(&lp, &uniform_nodes(17));
                let scaled: Vec<f64> = c.iter().map(|v| s * v).collect();
                let a = solve_kernels(&c, &lp, &mesh, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
                let b = solve_kernels(&scaled, &lp, &mesh, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
                for i in 0..17 {
                    let (da, db) = (a.ku_at(i, i), b.ku_at(i, i));
                    prop_assert!((db - s * da).abs() <= 4.0 * f64::EPSILON * da.abs());
                }
            }

            #[test]
            fn kv_transported_along_characteristics(tau in 50.0..70.0f64, s in 0.2..1.0f64) {
                let lp = derive_linearized(&TrafficParams::reference().with_tau(tau).unwrap()).unwrap();
                let mesh = TriMesh::new(17).unwrap();
                let c: Vec<f64> = true_c_sampler(&lp, &uniform_nodes(17)).iter().map(|v| s * v).collect();
                let kp = solve_kernels(&c, &lp, &mesh, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
                for i in 0..17 {
                    for j in 1..=i {
                        prop_assert!((kp.kv_at(i, j) - kp.kv_at(i - j, 0)).abs() <= DEFAULT_TOL);
                    }
                }
            }
        }
    }
}
