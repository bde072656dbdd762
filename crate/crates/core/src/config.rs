//! Experiment configuration, read from TOML with one section per component.
//!
//! ```toml
//! [experiment]
//! seed = 0
//! num_tasks = 10
//!
//! [backbone]
//! embed_dim = 32
//!
//! [round]
//! num_clients = 10
//!
//! [partition]
//! beta = 0.5
//!
//! [data]
//! source = "synthetic"
//! num_classes = 20
//! ```
//!
//! Missing keys take their defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{RasterSource, SyntheticConfig};
use crate::error::{Error, Result};
use crate::model::BackboneConfig;
use crate::optim::AdamWConfig;
use crate::subspace_memory::MemoryConfig;

/// Dirichlet concentrations commonly used for heterogeneity sweeps.
pub const BETA_PRESETS: [f64; 3] = [0.5, 0.1, 1.0];
/// Adapter ranks commonly compared.
pub const RANK_PRESETS: [usize; 4] = [1, 2, 32, 64];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub seed: u64,
    /// Independent runs; run `i` uses seed `seed + i`.
    pub repeats: usize,
    pub num_tasks: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seed: 0,
            repeats: 1,
            num_tasks: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundConfig {
    pub num_clients: usize,
    pub local_epochs: usize,
    pub rounds_per_task: usize,
    pub batch_size: usize,
    pub participation: f64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            num_clients: 10,
            local_epochs: 5,
            rounds_per_task: 1,
            batch_size: 16,
            participation: 1.0,
        }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.local_epochs == 0 || self.rounds_per_task == 0 || self.batch_size == 0 {
            return Err(Error::config(
                "num_clients, local_epochs, rounds_per_task and batch_size must be positive",
            ));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config(format!(
                "participation {} outside (0, 1]",
                self.participation
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub beta: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self { beta: BETA_PRESETS[0] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Seeded random orthonormal `A` instead of memory-guided selection.
    pub random_a: bool,
    /// Keep every memory empty.
    pub no_memory_update: bool,
    /// Weight `A` candidates by client sample count.
    pub weighted_a_avg: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataConfig {
    /// The synthetic seed is replaced by the run seed.
    Synthetic(SyntheticConfig),
    Idx { images: String, labels: String },
    Csv { path: String },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SyntheticConfig::default())
    }
}

impl DataConfig {
    pub fn raster_source(&self) -> Option<RasterSource> {
        match self {
            DataConfig::Synthetic(_) => None,
            DataConfig::Idx { images, labels } => Some(RasterSource::Idx {
                images: images.clone(),
                labels: labels.clone(),
            }),
            DataConfig::Csv { path } => Some(RasterSource::Csv { path: path.clone() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub backbone: BackboneConfig,
    pub memory: MemoryConfig,
    pub round: RoundConfig,
    pub partition: PartitionConfig,
    pub optimizer: AdamWConfig,
    pub ablation: AblationFlags,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config types serialize to TOML")
    }

    pub fn rank(&self) -> usize {
        self.memory.rank
    }

    pub fn validate(&self) -> Result<()> {
        let ex = &self.experiment;
        if ex.num_tasks == 0 || ex.repeats == 0 {
            return Err(Error::config("num_tasks and repeats must be positive"));
        }
        self.backbone.validate()?;
        self.memory.validate(self.backbone.embed_dim)?;
        self.round.validate()?;
        if !(self.partition.beta > 0.0) || !self.partition.beta.is_finite() {
            return Err(Error::config(format!(
                "Dirichlet beta must be positive, got {}",
                self.partition.beta
            )));
        }
        let o = &self.optimizer;
        for (name, v) in [
            ("adapter_lr", o.adapter_lr),
            ("head_lr", o.head_lr),
            ("weight_decay", o.weight_decay),
            ("eps", o.eps),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("optimizer {name} must be finite and non-negative")));
            }
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("optimizer betas must lie in [0, 1)"));
        }
        if let DataConfig::Synthetic(s) = &self.data {
            if s.num_classes % ex.num_tasks != 0 {
                return Err(Error::config(format!(
                    "{} classes cannot be split into {} equal tasks",
                    s.num_classes, ex.num_tasks
                )));
            }
            if s.input_dim != self.backbone.input_dim {
                return Err(Error::config(format!(
                    "data input_dim {} differs from backbone input_dim {}",
                    s.input_dim, self.backbone.input_dim
                )));
            }
        }
        Ok(())
    }
}
