//! End-to-end orchestration: dataset generation, inversion, training,
//! evaluation, ensembles and timing, driven by one TOML config.

mod dataset;
mod experiments;
mod plot;

pub use dataset::{
    ensure_dataset, generate_dataset, load_splits, validate_manifest, DatasetManifest, Failure, ManifestCheck, Record, Split,
    SplitCounts, MANIFEST_VERSION,
};
pub use experiments::{
    benchmark_speed, evaluate, run_inversion, train_model, uq_ensemble, BenchReport, EvalReport, EvalRow,
    InversionArtifacts, InversionSummary, Predictor, UqResult,
};
pub use plot::{write_csv_grid, write_pgm};

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bathy::{BcRanges, GrfSpec, SyntheticRiver};
use crate::error::{Error, Result};
use crate::fieldio::write_atomic;
use crate::fields::{BoundaryCondition, Grid};
use crate::nn::Activation;
use crate::pcga::InvertParams;
use crate::surrogates::{Hyperparams, ModelKind};
use crate::swe::SolverParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub grid: Grid,
    pub river: SyntheticRiver,
    pub grf: GrfSpec,
    pub bc: BcRanges,
    pub solver: SolverParams,
    pub dataset: DatasetConfig,
    pub invert: InvertConfig,
    pub train: TrainConfig,
    pub uq: UqConfig,
    pub bench: BenchConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 1,
            grid: Grid { nx: 64, ny: 16, dx: 25.0, dy: 7.5 },
            river: SyntheticRiver::default(),
            grf: GrfSpec::default(),
            bc: BcRanges::default(),
            solver: SolverParams::default(),
            dataset: DatasetConfig::default(),
            invert: InvertConfig::default(),
            train: TrainConfig::default(),
            uq: UqConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Fresh-stream redraws allowed per sample after a failed solve.
    pub max_retries: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { train: 500, val: 60, test: 60, max_retries: 5 }
    }
}

/// How the synthetic-twin truth departs from the prior mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Truth {
    /// prior mean + amplitude·mode[index]
    Mode { index: usize, amplitude: f64 },
    /// prior mean + Σ c_i·mode_i with c ~ N(0, scale²·I)
    PriorDraw { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvertConfig {
    pub k: usize,
    /// Observation noise σ as a fraction of the largest simulated speed.
    /// Zero leaves the observations clean.
    pub noise_fraction: f64,
    pub q: f64,
    pub zf: f64,
    pub truth: Truth,
    pub params: InvertParams,
}

impl Default for InvertConfig {
    fn default() -> Self {
        InvertConfig {
            k: 30,
            noise_fraction: 0.10,
            q: 400.0,
            zf: 31.0,
            truth: Truth::PriorDraw { scale: 1.0 },
            params: InvertParams::default(),
        }
    }
}

impl InvertConfig {
    pub fn bc(&self) -> Result<BoundaryCondition> {
        BoundaryCondition::new(self.q, self.zf)
    }
}

/// Optional per-model overrides on top of the tuned defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperOverrides {
    pub latent_dim: Option<usize>,
    pub hidden_layers: Option<usize>,
    pub hidden_width: Option<usize>,
    pub activation_hidden: Option<Activation>,
    pub activation_out: Option<Activation>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub reg_easting: Option<f64>,
    pub reg_northing: Option<f64>,
    pub batch_norm: Option<bool>,
    pub data_normalization: Option<bool>,
    pub epochs: Option<usize>,
    pub patience: Option<usize>,
    pub kl_weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub pca_dnn: HyperOverrides,
    pub se: HyperOverrides,
    pub sve: HyperOverrides,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            latent_dim: 20,
            pca_dnn: HyperOverrides { epochs: Some(300), ..Default::default() },
            se: HyperOverrides { epochs: Some(100), ..Default::default() },
            sve: HyperOverrides { epochs: Some(100), ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UqConfig {
    pub n: usize,
    pub q: f64,
    pub zf: f64,
}

impl Default for UqConfig {
    fn default() -> Self {
        UqConfig { n: 100, q: 651.2, zf: 33.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { repeats: 5 }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Config::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.grid.validate().map_err(cfg)?;
        self.grf.validate().map_err(cfg)?;
        self.bc.validate().map_err(cfg)?;
        self.solver.validate().map_err(cfg)?;
        if self.dataset.train == 0 || self.dataset.val == 0 {
            return Err(Error::Config("dataset needs at least one train and one validation sample".into()));
        }
        if self.invert.k == 0 || self.invert.k > self.grid.len() {
            return Err(Error::Config(format!("invert.k must be in 1..={}", self.grid.len())));
        }
        if !(self.invert.noise_fraction >= 0.0) {
            return Err(Error::Config("invert.noise_fraction must be non-negative".into()));
        }
        self.invert.bc().map_err(cfg)?;
        BoundaryCondition::new(self.uq.q, self.uq.zf).map_err(cfg)?;
        for kind in ModelKind::ALL {
            self.hyper(kind).validate(kind)?;
        }
        Ok(())
    }

    /// Resolved hyperparameters for one model kind.
    pub fn hyper(&self, kind: ModelKind) -> Hyperparams {
        let mut h = Hyperparams::for_kind(kind);
        h.latent_dim = self.train.latent_dim;
        let o = match kind {
            ModelKind::PcaDnn => &self.train.pca_dnn,
            ModelKind::Se => &self.train.se,
            ModelKind::Sve => &self.train.sve,
        };
        macro_rules! apply {
            ($($f:ident),*) => { $( if let Some(v) = o.$f.clone() { h.$f = v; } )* };
        }
        apply!(
            latent_dim,
            hidden_layers,
            hidden_width,
            activation_hidden,
            activation_out,
            batch_size,
            learning_rate,
            reg_easting,
            reg_northing,
            batch_norm,
            data_normalization,
            epochs,
            kl_weight
        );
        if o.patience.is_some() {
            h.patience = o.patience;
        }
        h
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex_digest(self.to_toml().as_bytes())
    }

    /// Writes the resolved config and its hash next to a run's outputs.
    pub fn record(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir)?;
        write_atomic(&out_dir.join("config.resolved.toml"), self.to_toml().as_bytes())?;
        write_atomic(&out_dir.join("config.sha256"), format!("{}\n", self.hash()).as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_desk_experiment() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!((c.grid.nx, c.grid.ny), (64, 16));
        assert_eq!((c.dataset.train, c.dataset.val, c.dataset.test), (500, 60, 60));
        assert_eq!(c.hyper(ModelKind::Se).latent_dim, 20);
        assert_eq!(c.hyper(ModelKind::Sve).reg_northing, 1e-3);
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let c = Config::from_toml(
            "seed = 7\n[dataset]\ntrain = 40\nval = 5\ntest = 5\n[train.se]\nepochs = 3\nlearning_rate = 0.01\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.hyper(ModelKind::Se).epochs, 3);
        assert_eq!(c.hyper(ModelKind::Se).learning_rate, 0.01);
        assert_eq!(c.hyper(ModelKind::PcaDnn).hidden_layers, 1);
        let back = Config::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn rejects_bad_config() {
        assert!(matches!(Config::from_toml("unknown = 1"), Err(Error::Config(_))));
        assert!(matches!(Config::from_toml("[train.se]\nlearning_rate = 0.3"), Err(Error::Config(_))));
        assert!(matches!(Config::from_toml("[grid]\nnx = 2\nny = 16\ndx = 1.0\ndy = 1.0"), Err(Error::Config(_))));
    }
}
