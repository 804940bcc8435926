//! TOML run configuration.
//!
//! Every key may be overridden from the environment as
//! `ARZNO_<SECTION>__<KEY>=<value>`, e.g. `ARZNO_GRID__T_END=60`. Values are
//! parsed as TOML and fall back to plain strings.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::{ControllerConfig, KernelSource, Scenario};
use crate::dataset::{CoefficientInput, DatasetConfig};
use crate::deeponet::{Architecture, TrainConfig};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::model::TrafficParams;
use crate::sim::AdaptiveGains;

pub const ENV_PREFIX: &str = "ARZNO_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficSection {
    /// m/s
    pub v_f: f64,
    /// veh/km
    pub rho_m: f64,
    /// veh/km
    pub rho_star: f64,
    /// s
    pub tau: f64,
    pub gamma0: f64,
    /// m
    pub length: f64,
    /// Overrides the derived reflection coefficient `r`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reflection: Option<f64>,
}

impl Default for TrafficSection {
    fn default() -> Self {
        let p = TrafficParams::reference();
        Self {
            v_f: p.v_f,
            rho_m: p.rho_m * 1000.0,
            rho_star: p.rho_star * 1000.0,
            tau: p.tau,
            gamma0: p.gamma0,
            length: p.length,
            reflection: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub n_x: usize,
    pub dt: f64,
    pub t_end: f64,
    /// Scale of the sinusoidal initial perturbation.
    pub perturbation: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { n_x: 60, dt: 0.1, t_end: 300.0, perturbation: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerSection {
    pub kernel_refresh_dt: f64,
    pub tau_guess: f64,
    pub kernel_mesh: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub gamma: f64,
    pub gamma1: f64,
}

impl Default for ControllerSection {
    fn default() -> Self {
        let c = ControllerConfig::default();
        Self {
            kernel_refresh_dt: c.kernel_refresh_dt,
            tau_guess: c.tau_guess,
            kernel_mesh: c.kernel_mesh,
            tol: c.tol,
            max_iter: c.max_iter,
            rho: c.gains.rho,
            gamma: c.gains.gamma,
            gamma1: c.gains.gamma1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeepOnetSection {
    pub m: usize,
    pub b: usize,
    pub branch_hidden: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub cosine: bool,
    pub queries_per_batch: usize,
}

impl Default for DeepOnetSection {
    fn default() -> Self {
        let a = Architecture::default();
        let t = TrainConfig::default();
        Self {
            m: a.m,
            b: a.b,
            branch_hidden: a.branch_hidden,
            trunk_hidden: a.trunk_hidden,
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            val_fraction: t.val_fraction,
            seed: t.seed,
            cosine: t.cosine,
            queries_per_batch: t.queries_per_batch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub n_families: usize,
    pub tau_lo: f64,
    pub tau_hi: f64,
    pub t_end: f64,
    pub subsample_dt: f64,
    pub seed: u64,
    pub equispaced: bool,
    pub input: CoefficientInput,
    /// Train, validation and test fractions of the families.
    pub split: [f64; 3],
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            n_families: d.n_families,
            tau_lo: d.tau_lo,
            tau_hi: d.tau_hi,
            t_end: d.t_end,
            subsample_dt: d.subsample_dt,
            seed: d.seed,
            equispaced: d.equispaced,
            input: d.input,
            split: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Timed acquisitions per kernel source.
    pub n: usize,
    /// Untimed acquisitions before timing starts.
    pub warmup: usize,
    /// Seed for the benchmark inputs.
    pub seed: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { n: 100, warmup: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub traffic: TrafficSection,
    pub grid: GridSection,
    pub controller: ControllerSection,
    pub deeponet: DeepOnetSection,
    pub dataset: DatasetSection,
    pub bench: BenchSection,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `text` and applies overrides from `vars` (name, value) pairs.
    pub fn from_toml_with_overrides<I>(text: &str, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let overrides: Vec<(String, String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                let rest = k.strip_prefix(ENV_PREFIX)?;
                let (section, key) = rest.split_once("__")?;
                Some((section.to_lowercase(), key.to_lowercase(), v))
            })
            .collect();
        if overrides.is_empty() {
            return Self::from_toml_str(text);
        }
        // report syntax problems against the original text first
        toml::from_str::<Self>(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for (section, key, raw) in overrides {
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or(toml::Value::String(raw.clone()));
            let entry = table.entry(section.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            match entry {
                toml::Value::Table(t) => {
                    t.insert(key, value);
                }
                _ => return Err(Error::Config(format!("`{section}` is not a section"))),
            }
        }
        let merged = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml_str(&merged).map_err(|e| Error::Config(format!("after environment overrides: {e}")))
    }

    /// Reads `path` (or the defaults when `None`) and applies `ARZNO_*` variables.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, std::env::vars())
            .map_err(|e| match (e, path) {
                (Error::Config(msg), Some(p)) => Error::Config(format!("{}: {msg}", p.display())),
                (e, _) => e,
            })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 (hex) of the resolved configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn hash_bytes(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    pub fn validate(&self) -> Result<()> {
        let sc = self.scenario()?;
        self.controller(KernelSource::ClassicalSolver).validate(&sc.grid)?;
        self.architecture().validate()?;
        self.train_config().validate()?;
        self.dataset_config().validate(sc.grid.dt)?;
        let s = self.dataset.split;
        if s.iter().any(|r| !(*r > 0.0)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("dataset.split {s:?} must be positive and sum to 1")));
        }
        if !(self.grid.perturbation.is_finite()) {
            return Err(Error::Config("grid.perturbation must be finite".into()));
        }
        Ok(())
    }

    pub fn traffic(&self) -> Result<TrafficParams> {
        let t = &self.traffic;
        TrafficParams::new(t.v_f, t.rho_m / 1000.0, t.rho_star / 1000.0, t.tau, t.gamma0, t.length)
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid.n_x, self.grid.dt, self.grid.t_end)
    }

    pub fn scenario(&self) -> Result<Scenario> {
        let mut sc = Scenario::new(self.traffic()?, self.grid()?)?;
        if let Some(r) = self.traffic.reflection {
            sc = sc.with_reflection(r);
        }
        sc.perturbation = self.grid.perturbation;
        sc.grid.check_cfl(sc.linear.speeds().0, sc.linear.speeds().1)?;
        Ok(sc)
    }

    pub fn controller(&self, source: KernelSource) -> ControllerConfig {
        let c = &self.controller;
        ControllerConfig {
            kernel_source: source,
            kernel_refresh_dt: c.kernel_refresh_dt,
            gains: AdaptiveGains { rho: c.rho, gamma: c.gamma, gamma1: c.gamma1 },
            tau_guess: c.tau_guess,
            kernel_mesh: c.kernel_mesh,
            tol: c.tol,
            max_iter: c.max_iter,
        }
    }

    pub fn architecture(&self) -> Architecture {
        let d = &self.deeponet;
        Architecture { m: d.m, b: d.b, branch_hidden: d.branch_hidden.clone(), trunk_hidden: d.trunk_hidden.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        let d = &self.deeponet;
        TrainConfig {
            lr: d.lr,
            batch_size: d.batch_size,
            epochs: d.epochs,
            val_fraction: d.val_fraction,
            seed: d.seed,
            cosine: d.cosine,
            queries_per_batch: d.queries_per_batch,
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let d = &self.dataset;
        DatasetConfig {
            n_families: d.n_families,
            tau_lo: d.tau_lo,
            tau_hi: d.tau_hi,
            t_end: d.t_end,
            subsample_dt: d.subsample_dt,
            seed: d.seed,
            equispaced: d.equispaced,
            input: d.input,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn empty_file_gives_reference_defaults() {
        let c = Config::from_toml_str("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.traffic().unwrap(), TrafficParams::reference());
        assert_eq!(c.scenario().unwrap(), Scenario::reference());
        assert_eq!(c.controller(KernelSource::ClassicalSolver), ControllerConfig::default());
        assert_eq!(c.architecture(), Architecture::default());
        assert_eq!(c.train_config(), TrainConfig::default());
        assert_eq!(c.dataset_config(), DatasetConfig::default());
    }

    #[test]
    fn defaults_round_trip_through_text() {
        let c = Config::default();
        assert_eq!(Config::from_toml_str(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = Config::from_toml_str("[grid]\nn_x = 60\nnx = 3\n").unwrap_err().to_string();
        assert!(err.contains("nx"), "{err}");
        assert!(err.contains("line 3"), "{err}");
        assert!(Config::from_toml_str("[nonsense]\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(Config::from_toml_str("[grid]\ndt = 2.0\n").is_err());
        assert!(Config::from_toml_str("[traffic]\nrho_star = 170.0\n").is_err());
        assert!(Config::from_toml_str("[dataset]\nsplit = [0.5, 0.5, 0.5]\n").is_err());
        assert!(Config::from_toml_str("[controller]\ngamma = -1.0\n").is_err());
    }

    #[test]
    fn environment_overrides() {
        let text = "[grid]\nt_end = 100.0\n";
        let c = Config::from_toml_with_overrides(
            text,
            env(&[
                ("ARZNO_GRID__T_END", "60"),
                ("ARZNO_DATASET__INPUT", "true-c"),
                ("ARZNO_DEEPONET__TRUNK_HIDDEN", "[8, 8]"),
                ("ARZNO_TRAFFIC__REFLECTION", "0.5"),
                ("PATH", "/usr/bin"),
            ]),
        )
        .unwrap();
        assert_eq!(c.grid.t_end, 60.0);
        assert_eq!(c.dataset.input, CoefficientInput::True);
        assert_eq!(c.deeponet.trunk_hidden, vec![8, 8]);
        assert_eq!(c.scenario().unwrap().linear.r, 0.5);
        let err = Config::from_toml_with_overrides("", env(&[("ARZNO_GRID__BOGUS", "1")])).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        b.grid.t_end = 10.0;
        assert_ne!(a.hash(), b.hash());
    }
}
