//! Run and experiment reports, serialized as JSON.

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::TaskSchedule;
use crate::federated::TaskReport;
use crate::metrics::{AccuracyMatrix, CommLedger};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub schedule: TaskSchedule,
    /// Per task, per client: local training samples.
    pub shard_sizes: Vec<Vec<usize>>,
    pub tasks: Vec<TaskReport>,
    pub accuracy: AccuracyMatrix,
    pub faa: f64,
    pub forgetting: Option<f64>,
    pub backward_transfer: Option<f64>,
    pub comm: CommLedger,
    pub model_checksum: String,
}

/// Wall-clock durations; only present when requested, since they break
/// byte-for-byte comparisons between runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub version: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunReport>,
    pub mean_faa: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

impl ExperimentReport {
    pub fn new(config: ExperimentConfig, runs: Vec<RunReport>) -> Self {
        let mean_faa = if runs.is_empty() {
            0.0
        } else {
            runs.iter().map(|r| r.faa).sum::<f64>() / runs.len() as f64
        };
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seeds: runs.iter().map(|r| r.seed).collect(),
            runs,
            mean_faa,
            timings: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports contain only finite numbers");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> crate::Result<Self> {
        serde_json::from_str(text).map_err(|e| crate::Error::Data(format!("invalid report: {e}")))
    }
}
