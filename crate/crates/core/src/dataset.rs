//! Training corpus of `(c_hat, Ku, Kv)` triples harvested from adaptive
//! closed-loop runs with the classical kernel solver.
//!
//! Each family (one sampled relaxation time) is written to its own binary
//! file: magic `ARZNODSR`, version (u32), then records of the family's `tau`
//! and `t` (f64), the estimate on the kernel mesh (`n` f64) and a kernel record.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::{run_closed_loop_with, ControllerConfig, RunOptions, Scenario, SolverProvider};
use crate::deeponet::TrainingSet;
use crate::error::{Error, Result};
use crate::grid::{uniform_nodes, GridSpec};
use crate::kernel::{read_f64, read_f64s, KernelPair, TriMesh};
use crate::model::true_c_sampler;

pub const MAGIC: &[u8; 8] = b"ARZNODSR";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

/// Which coefficient is stored as the operator input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoefficientInput {
    /// The identifier's running estimate (the kernels the controller actually needs).
    Estimate,
    /// The true `c(x)` of the family, repeated at every sampling time.
    #[serde(rename = "true-c")]
    True,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_families: usize,
    pub tau_lo: f64,
    pub tau_hi: f64,
    /// Simulated seconds per family.
    pub t_end: f64,
    pub subsample_dt: f64,
    pub seed: u64,
    /// Equispaced relaxation times instead of uniform draws.
    pub equispaced: bool,
    pub input: CoefficientInput,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_families: 10,
            tau_lo: 50.0,
            tau_hi: 70.0,
            t_end: 300.0,
            subsample_dt: 0.1,
            seed: 0,
            equispaced: false,
            input: CoefficientInput::Estimate,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self, dt: f64) -> Result<()> {
        if self.n_families == 0 {
            return Err(Error::InvalidParams("n_families must be positive".into()));
        }
        if !(self.tau_lo > 0.0 && self.tau_hi >= self.tau_lo && self.tau_hi.is_finite()) {
            return Err(Error::InvalidParams(format!("bad tau range ({}, {})", self.tau_lo, self.tau_hi)));
        }
        if !(self.subsample_dt >= dt * (1.0 - 1e-9)) {
            return Err(Error::InvalidParams(format!(
                "subsample_dt = {} is below the simulation step {dt}",
                self.subsample_dt
            )));
        }
        if !(self.t_end > 0.0) {
            return Err(Error::InvalidParams("t_end must be positive".into()));
        }
        Ok(())
    }

    /// Relaxation time of every family, in order.
    pub fn taus(&self) -> Vec<f64> {
        let n = self.n_families;
        if self.equispaced {
            if n == 1 {
                return vec![0.5 * (self.tau_lo + self.tau_hi)];
            }
            return (0..n).map(|i| self.tau_lo + (self.tau_hi - self.tau_lo) * i as f64 / (n - 1) as f64).collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..n)
            .map(|_| if self.tau_hi > self.tau_lo { rng.random_range(self.tau_lo..self.tau_hi) } else { self.tau_lo })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyEntry {
    pub index: usize,
    pub tau: f64,
    pub file: String,
    pub records: usize,
    /// Why the family was skipped; absent for completed families.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub mesh: usize,
    pub subsample_dt: f64,
    pub t_end: f64,
    pub input: CoefficientInput,
    pub total_records: usize,
    pub families: Vec<FamilyEntry>,
}

impl Manifest {
    pub fn completed(&self) -> impl Iterator<Item = &FamilyEntry> {
        self.families.iter().filter(|f| f.skipped.is_none())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    fn with_families(&self, families: Vec<FamilyEntry>) -> Self {
        let total_records = families.iter().filter(|f| f.skipped.is_none()).map(|f| f.records).sum();
        Self { families, total_records, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    /// Relaxation time of the family the record came from.
    pub tau: f64,
    pub t: f64,
    pub c_hat: Vec<f64>,
    pub kernels: KernelPair,
}

impl Record {
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.tau.to_le_bytes())?;
        w.write_all(&self.t.to_le_bytes())?;
        for v in &self.c_hat {
            w.write_all(&v.to_le_bytes())?;
        }
        self.kernels.write_record(w)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        buf
    }

    /// SHA-256 of the serialized record.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}

fn family_file(index: usize) -> String {
    format!("family_{index:03}.bin")
}

/// Runs every family and writes records plus `manifest.toml` into `out_dir`.
/// Families run on a pool of `jobs` threads; a family whose run fails is
/// logged and recorded as skipped.
pub fn generate(
    base: &Scenario,
    ctrl: &ControllerConfig,
    ds: &DatasetConfig,
    out_dir: &Path,
    jobs: usize,
    config_hash: &str,
) -> Result<Manifest> {
    ds.validate(base.grid.dt)?;
    ctrl.validate(&base.grid)?;
    fs::create_dir_all(out_dir)?;
    let taus = ds.taus();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidParams(e.to_string()))?;
    let results: Vec<Result<FamilyEntry>> = pool.install(|| {
        taus.par_iter()
            .enumerate()
            .map(|(index, &tau)| generate_family(base, ctrl, ds, out_dir, index, tau))
            .collect()
    });
    let mut families = Vec::with_capacity(results.len());
    for r in results {
        families.push(r?);
    }
    let manifest = Manifest {
        config_hash: config_hash.to_string(),
        seed: ds.seed,
        mesh: ctrl.kernel_mesh,
        subsample_dt: ds.subsample_dt,
        t_end: ds.t_end,
        input: ds.input,
        total_records: 0,
        families: Vec::new(),
    }
    .with_families(families);
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn generate_family(
    base: &Scenario,
    ctrl: &ControllerConfig,
    ds: &DatasetConfig,
    out_dir: &Path,
    index: usize,
    tau: f64,
) -> Result<FamilyEntry> {
    let traffic = base.traffic.with_tau(tau)?;
    let grid = GridSpec::new(base.grid.n_x, base.grid.dt, ds.t_end)?;
    let mut sc = Scenario::new(traffic, grid)?.with_reflection(base.linear.r);
    sc.perturbation = base.perturbation;
    let cfg = ControllerConfig { kernel_refresh_dt: ds.subsample_dt, ..ctrl.clone() };
    let mesh = TriMesh::new(cfg.kernel_mesh)?;
    let c_true = true_c_sampler(&sc.linear, &uniform_nodes(mesh.n()));
    let mut provider = SolverProvider::new(sc.linear, mesh, cfg.tol, cfg.max_iter);
    let true_kernels = match ds.input {
        CoefficientInput::True => Some(crate::kernel::solve_kernels(&c_true, &sc.linear, &mesh, cfg.tol, cfg.max_iter)?),
        CoefficientInput::Estimate => None,
    };

    let file = family_file(index);
    let path = out_dir.join(&file);
    let mut w = BufWriter::new(File::create(&path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let mut records = 0usize;
    let mut write_err: Option<Error> = None;
    let opts = RunOptions { snapshot_every: 0, diagnostics: false };
    let run = run_closed_loop_with(&sc, &cfg, &mut provider, opts, &mut |ev| {
        if write_err.is_some() {
            return;
        }
        let rec = match &true_kernels {
            Some(k) => Record { tau, t: ev.t, c_hat: c_true.clone(), kernels: k.clone() },
            None => Record { tau, t: ev.t, c_hat: ev.c_hat.to_vec(), kernels: ev.kernels.clone() },
        };
        match rec.write(&mut w) {
            Ok(()) => records += 1,
            Err(e) => write_err = Some(e),
        }
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    w.flush()?;
    drop(w);
    match run {
        Ok(_) => {
            log::info!("family {index}: tau = {tau:.3} s, {records} records");
            Ok(FamilyEntry { index, tau, file, records, skipped: None })
        }
        Err(e @ (Error::Instability { .. } | Error::Domain(_) | Error::NoConvergence { .. })) => {
            log::warn!("family {index} (tau = {tau:.3} s) skipped: {e}");
            fs::remove_file(&path)?;
            Ok(FamilyEntry { index, tau, file, records: 0, skipped: Some(e.to_string()) })
        }
        Err(e) => Err(e),
    }
}

/// Reads every record of one family file.
pub fn read_family(path: &Path, mesh: usize) -> Result<Vec<Record>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    let mut version = [0u8; 4];
    let header = r.read_exact(&mut magic).and_then(|_| r.read_exact(&mut version));
    if header.is_err() || &magic != MAGIC {
        return Err(Error::Format(format!("{} is not a dataset record file", path.display())));
    }
    if u32::from_le_bytes(version) != VERSION {
        return Err(Error::Format(format!("{}: unsupported version", path.display())));
    }
    let mut out = Vec::new();
    loop {
        let mut first = [0u8; 8];
        match r.read(&mut first[..1])? {
            0 => break,
            _ => r.read_exact(&mut first[1..]).map_err(|_| Error::Format("truncated record".into()))?,
        }
        let tau = f64::from_le_bytes(first);
        let t = read_f64(&mut r)?;
        let c_hat = read_f64s(&mut r, mesh)?;
        let kernels = KernelPair::read_record(&mut r)?;
        if kernels.mesh().n() != mesh {
            return Err(Error::Format(format!("record mesh {} differs from manifest mesh {mesh}", kernels.mesh().n())));
        }
        out.push(Record { tau, t, c_hat, kernels });
    }
    Ok(out)
}

/// All records of the completed families of `manifest`, family by family.
pub fn load_records(manifest: &Manifest, dir: &Path) -> Result<Vec<Record>> {
    let mut out = Vec::with_capacity(manifest.total_records);
    for f in manifest.completed() {
        let recs = read_family(&dir.join(&f.file), manifest.mesh)?;
        if recs.len() != f.records {
            return Err(Error::Format(format!("{} holds {} records, manifest says {}", f.file, recs.len(), f.records)));
        }
        out.extend(recs);
    }
    Ok(out)
}

/// Operator training set with inputs resampled to `m` points.
pub fn load_training_set(manifest: &Manifest, dir: &Path, m: usize) -> Result<TrainingSet> {
    let records = load_records(manifest, dir)?;
    if records.is_empty() {
        return Err(Error::InvalidParams("manifest lists no records".into()));
    }
    TrainingSet::from_pairs(records.iter().map(|r| (r.c_hat.as_slice(), &r.kernels)), m)
}

/// Family-stratified split into train, validation and test manifests.
pub fn split(manifest: &Manifest, ratio: [f64; 3], seed: u64) -> Result<(Manifest, Manifest, Manifest)> {
    if ratio.iter().any(|r| !(*r > 0.0)) || (ratio.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParams(format!("split ratio {ratio:?} must be positive and sum to 1")));
    }
    let mut fams: Vec<FamilyEntry> = manifest.completed().cloned().collect();
    let n = fams.len();
    if n < 3 {
        return Err(Error::InvalidParams(format!("{n} completed families cannot fill three splits")));
    }
    // largest remainder, then make sure no split is empty
    let exact: Vec<f64> = ratio.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    for &k in order.iter().cycle().take(n - counts.iter().sum::<usize>()) {
        counts[k] += 1;
    }
    for k in 0..3 {
        while counts[k] == 0 {
            let donor = (0..3).max_by_key(|&j| counts[j]).unwrap();
            counts[donor] -= 1;
            counts[k] += 1;
        }
    }
    fams.sort_by_key(|f| f.index);
    fams.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = Vec::with_capacity(3);
    let mut rest = fams.as_slice();
    for &c in &counts {
        let (head, tail) = rest.split_at(c);
        let mut part = head.to_vec();
        part.sort_by_key(|f| f.index);
        parts.push(manifest.with_families(part));
        rest = tail;
    }
    let test = parts.pop().unwrap();
    let val = parts.pop().unwrap();
    let train = parts.pop().unwrap();
    Ok((train, val, test))
}

/// Path of the manifest inside a dataset directory.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}
