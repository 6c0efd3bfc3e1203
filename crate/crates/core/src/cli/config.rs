//! The TOML run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::digest;
use crate::distill::Estimator;
use crate::engine::DistillConfig;
use crate::error::{Error, Result};
use crate::generators::{FieldArch, GeneratorKind};
use crate::schedule::ScheduleConfig;
#[cfg(feature = "remote")]
use crate::score::RemoteConfig;
use crate::score::{Condition, MixtureSpec, TrainConfig};
use crate::toy::{self, BarsConfig, ToyDomain, TwoModeConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Estimators run side by side on one seed. Empty means just
    /// `distill.estimator`.
    pub paired: Vec<Estimator>,
    pub schedule: ScheduleConfig,
    pub domain: Option<DomainConfig>,
    pub score: ScoreConfig,
    pub generator: GeneratorConfig,
    pub distill: DistillConfig,
    pub probe: ProbeConfig,
    pub sample: SampleConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DomainConfig {
    TwoMode(TwoModeConfig),
    Bars(BarsConfig),
    /// An arbitrary mixture; `shape` defaults to `[dim]`.
    Mixture {
        spec: MixtureSpec,
        #[serde(default)]
        shape: Option<Vec<usize>>,
    },
}

impl DomainConfig {
    pub fn build(&self) -> Result<ToyDomain> {
        match self {
            DomainConfig::TwoMode(c) => toy::two_mode(*c),
            DomainConfig::Bars(c) => toy::bars(*c),
            DomainConfig::Mixture { spec, shape } => {
                let shape = shape.clone().unwrap_or_else(|| vec![spec.dim()]);
                if shape.iter().product::<usize>() != spec.dim() {
                    return Err(Error::config("domain.mixture.shape does not match spec.dim"));
                }
                let sigma =
                    spec.mixture(&Condition::Null)?.components.iter().map(|c| c.variance.sqrt()).fold(0.0, f64::max);
                Ok(ToyDomain { spec: spec.clone(), shape, sigma })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    #[default]
    Analytic,
    Checkpoint,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    pub source: ScoreSource,
    /// Model stem (without extension) for `source = "checkpoint"`.
    pub checkpoint: Option<PathBuf>,
    #[cfg(feature = "remote")]
    pub remote: Option<RemoteConfig>,
    pub dataset: Option<DatasetConfig>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_per_condition: usize,
    pub seed: u64,
    /// Held-out noisings used to compare the trained model with the oracle.
    pub heldout: usize,
    /// RMSE against the oracle above which training counts as failed.
    pub max_heldout_rmse: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n_per_condition: 2000, seed: 0, heldout: 512, max_heldout_rmse: 0.35 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    pub arch: FieldArch,
    /// Seed for θ; defaults to `distill.seed`.
    pub init_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub condition: Condition,
    pub s: f64,
    pub seed: u64,
    pub n_draws: usize,
    /// Explicit timesteps; defaults to {100, 200, 300, 500, 700, 1000}·T/1000.
    pub t_grid: Option<Vec<usize>>,
    /// Probe the in-domain point against itself instead of a degraded mean.
    pub in_domain_only: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { condition: Condition::Class(0), s: 7.5, seed: 0, n_draws: 64, t_grid: None, in_domain_only: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub condition: Condition,
    pub scales: Vec<f64>,
    pub chains: usize,
    pub seed: u64,
    /// Samples per scale written to disk.
    pub dump: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            condition: Condition::Class(0),
            scales: vec![1.0, 4.0, 7.5, 15.0, 30.0, 100.0],
            chains: 500,
            seed: 0,
            dump: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write PGM images for image-shaped outputs.
    pub pgm: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/default"), pgm: true }
    }
}

/// Default probe timesteps at T = 1000.
pub const T_GRID_1000: [usize; 6] = [100, 200, 300, 500, 700, 1000];

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config(e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(format!("{path}: {}", e.into_inner().message().trim_end()))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Hash of the canonical JSON form; identifies a run in its output directory.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        digest::sha256_hex(&json)
    }

    pub fn domain(&self) -> Result<Option<ToyDomain>> {
        self.domain.as_ref().map(DomainConfig::build).transpose()
    }

    pub fn require_domain(&self, why: &str) -> Result<ToyDomain> {
        self.domain()?.ok_or_else(|| Error::config(format!("domain: section required {why}")))
    }

    pub fn estimators(&self) -> Vec<Estimator> {
        if self.paired.is_empty() {
            vec![self.distill.estimator]
        } else {
            self.paired.clone()
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.distill.seed = seed;
        self.probe.seed = seed;
        self.sample.seed = seed;
        self.score.train.seed = seed;
        if let Some(d) = &mut self.score.dataset {
            d.seed = seed;
        }
    }
}
