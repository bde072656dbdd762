//! Accuracy matrix, final average accuracy, forgetting, and communication
//! accounting.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{Dataset, Split, TaskSchedule};
use crate::error::{Error, Location, Result};
use crate::federated::select_participants;
use crate::model::ModelState;

/// Lower-triangular `R[t][i]`: accuracy on task `i` after training task `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    num_tasks: usize,
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        Self {
            num_tasks,
            rows: Vec::new(),
        }
    }

    /// Builds a matrix from complete rows; row `t` must hold `t + 1` entries.
    pub fn from_rows(num_tasks: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(num_tasks);
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len();
        if t >= self.num_tasks {
            return Err(Error::State(format!("matrix already holds {} rows", self.num_tasks)));
        }
        if row.len() != t + 1 {
            return Err(Error::State(format!("row {t} needs {} entries, got {}", t + 1, row.len())));
        }
        if let Some(bad) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::State(format!("accuracy {bad} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(i)).copied()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.num_tasks && self.num_tasks > 0
    }

    /// Header `t,task_1,..,task_T`, then one line per trained task with
    /// empty cells above the diagonal.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for i in 1..=self.num_tasks {
            write!(out, ",task_{i}").unwrap();
        }
        out.push('\n');
        for (t, row) in self.rows.iter().enumerate() {
            write!(out, "{}", t + 1).unwrap();
            for i in 0..self.num_tasks {
                out.push(',');
                if let Some(v) = row.get(i) {
                    write!(out, "{v}").unwrap();
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::Parse {
            location: Location::Line(1),
            reason: "empty accuracy matrix".into(),
        })?;
        let num_tasks = header.split(',').count() - 1;
        let mut m = Self::new(num_tasks);
        for (idx, line) in lines {
            let line_no = idx + 1;
            let parse_err = |reason: String| Error::Parse {
                location: Location::Line(line_no),
                reason,
            };
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != num_tasks + 1 {
                return Err(parse_err(format!("{} cells, expected {}", cells.len(), num_tasks + 1)));
            }
            let t = m.rows.len();
            let mut row = Vec::with_capacity(t + 1);
            for (i, cell) in cells[1..].iter().enumerate() {
                match (i <= t, cell.is_empty()) {
                    (true, false) => row.push(
                        cell.parse::<f64>()
                            .map_err(|_| parse_err(format!("`{cell}` is not a number")))?,
                    ),
                    (false, true) => {}
                    (true, true) => return Err(parse_err(format!("missing entry for task {}", i + 1))),
                    (false, false) => {
                        return Err(parse_err(format!("entry above the diagonal for task {}", i + 1)))
                    }
                }
            }
            m.push_row(row).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(m)
    }
}

/// Mean of the final row.
pub fn faa(r: &AccuracyMatrix) -> Result<f64> {
    if !r.is_complete() {
        return Err(Error::State(format!(
            "final row missing: {} of {} tasks recorded",
            r.rows.len(),
            r.num_tasks
        )));
    }
    let last = r.rows.last().expect("complete matrix has rows");
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Mean over earlier tasks of the drop from their best accuracy to the
/// final one. `None` for a single task.
pub fn forgetting(r: &AccuracyMatrix) -> Option<f64> {
    let last = r.rows.len().checked_sub(1).filter(|&t| t > 0)?;
    let total: f64 = (0..last)
        .map(|i| {
            let best = (i..last).map(|t| r.rows[t][i]).fold(f64::NEG_INFINITY, f64::max);
            best - r.rows[last][i]
        })
        .sum();
    Some(total / last as f64)
}

/// Mean over earlier tasks of final accuracy minus accuracy right after
/// learning the task.
pub fn backward_transfer(r: &AccuracyMatrix) -> Option<f64> {
    let last = r.rows.len().checked_sub(1).filter(|&t| t > 0)?;
    let total: f64 = (0..last).map(|i| r.rows[last][i] - r.rows[i][i]).sum();
    Some(total / last as f64)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 256;

/// Top-1 accuracy on the test samples of each task `0..=upto`, with logits
/// over every class seen by `model`.
pub fn evaluate(model: &ModelState, dataset: &Dataset, schedule: &TaskSchedule, upto: usize) -> Result<Vec<f64>> {
    (0..=upto)
        .into_par_iter()
        .map(|i| {
            let indices = dataset.indices_for(Split::Test, &schedule.tasks[i]);
            if indices.is_empty() {
                return Ok(0.0);
            }
            let mut correct = 0usize;
            for chunk in indices.chunks(EVAL_CHUNK) {
                let logits = model.forward(&dataset.gather(chunk), false)?.logits;
                for (row, &idx) in chunk.iter().enumerate() {
                    let target = schedule
                        .head_index(dataset.labels()[idx])
                        .ok_or_else(|| Error::Data(format!("label {} not scheduled", dataset.labels()[idx])))?;
                    if argmax(logits.row(row)) == target {
                        correct += 1;
                    }
                }
            }
            Ok(correct as f64 / indices.len() as f64)
        })
        .collect()
}

/// Gini coefficient of non-negative counts: 0 for a uniform histogram.
pub fn gini(counts: &[usize]) -> f64 {
    let n = counts.len();
    let total: usize = counts.iter().sum();
    if n == 0 || total == 0 {
        return 0.0;
    }
    let mut diff = 0.0;
    for &a in counts {
        for &b in counts {
            diff += (a as f64 - b as f64).abs();
        }
    }
    diff / (2.0 * n as f64 * total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommPhase {
    /// Upload of the first task's `A` candidates from a calibration pass.
    Bootstrap,
    Round(usize),
}

/// Parameters one client exchanged with the server in one phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommEntry {
    pub task: usize,
    pub phase: CommPhase,
    pub client_id: usize,
    pub upload_params: u64,
    pub upload_bytes: u64,
    pub download_params: u64,
    pub download_bytes: u64,
}

impl CommEntry {
    pub fn new(task: usize, phase: CommPhase, client_id: usize, upload_params: u64, download_params: u64) -> Self {
        Self {
            task,
            phase,
            client_id,
            upload_params,
            upload_bytes: 8 * upload_params,
            download_params,
            download_bytes: 8 * download_params,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommLedger {
    pub entries: Vec<CommEntry>,
}

impl CommLedger {
    pub fn push(&mut self, entry: CommEntry) {
        self.entries.push(entry);
    }

    pub fn total_upload_params(&self) -> u64 {
        self.entries.iter().map(|e| e.upload_params).sum()
    }

    pub fn total_download_params(&self) -> u64 {
        self.entries.iter().map(|e| e.download_params).sum()
    }

    pub fn round_entries(&self, task: usize, round: usize) -> impl Iterator<Item = &CommEntry> {
        self.entries
            .iter()
            .filter(move |e| e.task == task && e.phase == CommPhase::Round(round))
    }
}

/// Per-layer size of the two `B` (or two `A`) factors.
pub fn adapter_pair_params(rank: usize, embed_dim: usize) -> u64 {
    2 * (rank * embed_dim) as u64
}

/// Parameters a client uploads after local training: every layer's `B_K`
/// and `B_V` plus the current task's head rows.
pub fn round_upload_params(layers: usize, rank: usize, embed_dim: usize, head_rows: usize) -> u64 {
    layers as u64 * adapter_pair_params(rank, embed_dim) + (head_rows * embed_dim) as u64
}

/// Parameters broadcast to a client at the start of a round: `A` and `B`
/// for both projections of every layer and the head over all seen classes.
pub fn round_download_params(layers: usize, rank: usize, embed_dim: usize, seen_classes: usize) -> u64 {
    2 * layers as u64 * adapter_pair_params(rank, embed_dim) + (seen_classes * embed_dim) as u64
}

/// The ledger a run of `config` produces, derived from the configuration
/// alone. `classes_per_task` is `C / T`.
pub fn comm_cost(config: &ExperimentConfig, seed: u64, classes_per_task: usize) -> CommLedger {
    let layers = config.backbone.num_layers;
    let d = config.backbone.embed_dim;
    let r = config.rank();
    let k = config.round.num_clients;
    let tasks = config.experiment.num_tasks;
    let rounds = config.round.rounds_per_task;
    let proposes = !config.ablation.random_a;
    let basis = layers as u64 * adapter_pair_params(r, d);

    let mut ledger = CommLedger::default();
    if proposes {
        for c in 0..k {
            ledger.push(CommEntry::new(0, CommPhase::Bootstrap, c, basis, 0));
        }
    }
    for t in 0..tasks {
        let seen = (t + 1) * classes_per_task;
        for round in 0..rounds {
            let boundary = proposes && round + 1 == rounds && t + 1 < tasks;
            for c in select_participants(k, config.round.participation, seed, t, round) {
                let up = round_upload_params(layers, r, d, classes_per_task) + if boundary { basis } else { 0 };
                ledger.push(CommEntry::new(t, CommPhase::Round(round), c, up, round_download_params(layers, r, d, seen)));
            }
        }
    }
    ledger
}
