//! The federated protocol: broadcast, local training of `B`, weighted `B`
//! aggregation, client-side basis proposals from the subspace memories,
//! and server-side averaging of those proposals into the next task's `A`.
//!
//! Per-client work runs on the rayon pool. Every random stream derives from
//! the experiment seed and the client, task, round and epoch coordinates
//! (see [`crate::rng`]), and aggregation always sums in ascending client id
//! order, so results do not depend on the thread count.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AblationFlags, DataConfig, ExperimentConfig};
pub use crate::config::RoundConfig;
use crate::data::{build_schedule, generate_synthetic, ingest_raster, Dataset, Split, TaskSchedule};
use crate::error::{Error, Result};
use crate::linalg::{dot, project_complement, qr_orthonormalize, DenseMatrix};
use crate::metrics::{
    adapter_pair_params, backward_transfer, evaluate, faa, forgetting, round_download_params,
    round_upload_params, AccuracyMatrix, CommEntry, CommLedger, CommPhase,
};
use crate::model::{AdapterBases, Backbone, LayerB, ModelState};
use crate::optim::{apply_adamw, AdamWConfig, OptimizerState};
use crate::report::{ExperimentReport, RunReport};
use crate::rng::{derive_seed, gaussian_matrix, rng_for, Rng, Stream};
use crate::subspace_memory::{ActivationBuffer, MemoryConfig, Projection, StoredSide, SubspaceMemory};

/// Column norm below which an averaged basis counts as rank deficient.
pub const REPAIR_THRESHOLD: f64 = 1e-10;

/// Splits sample positions `0..labels.len()` across `num_clients`.
///
/// For each class (ascending id) client proportions are drawn from a
/// symmetric Dirichlet(`beta`), counts are rounded by largest remainder
/// (ties to the lower client id), and the class's samples are dealt out in
/// a seeded random order. Clients left empty then take one sample each
/// from the currently largest client.
pub fn dirichlet_partition(labels: &[usize], num_clients: usize, beta: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::config(format!("Dirichlet beta must be positive, got {beta}")));
    }
    if num_clients == 0 {
        return Err(Error::config("at least one client is required"));
    }
    if labels.len() < num_clients {
        return Err(Error::Data(format!(
            "{} samples cannot cover {num_clients} clients",
            labels.len()
        )));
    }
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = rng_for(seed, Stream::Partition, &[]);
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();

    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for &c in &classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let draws: Vec<f64> = (0..num_clients).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        let props: Vec<f64> = if total > 0.0 && total.is_finite() {
            draws.iter().map(|g| g / total).collect()
        } else {
            vec![1.0 / num_clients as f64; num_clients]
        };
        let counts = largest_remainder(&props, members.len());
        let mut next = 0;
        for (k, &n) in counts.iter().enumerate() {
            clients[k].extend_from_slice(&members[next..next + n]);
            next += n;
        }
    }
    while let Some(empty) = clients.iter().position(Vec::is_empty) {
        let donor = (0..num_clients)
            .max_by(|&a, &b| clients[a].len().cmp(&clients[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        let moved = clients[donor].pop().expect("donor holds at least two samples");
        clients[empty].push(moved);
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    Ok(clients)
}

fn largest_remainder(props: &[f64], n: usize) -> Vec<usize> {
    let quotas: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Per task, per client: dataset indices of the local training shard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub beta: f64,
    pub tasks: Vec<Vec<Vec<usize>>>,
}

impl PartitionPlan {
    /// Partitions each task's training samples independently, with the
    /// partition seed derived from `(seed, task)`.
    pub fn build(dataset: &Dataset, schedule: &TaskSchedule, num_clients: usize, beta: f64, seed: u64) -> Result<Self> {
        let mut tasks = Vec::with_capacity(schedule.num_tasks());
        for (t, classes) in schedule.tasks.iter().enumerate() {
            let indices = dataset.indices_for(Split::Train, classes);
            let labels: Vec<usize> = indices.iter().map(|&i| dataset.labels()[i]).collect();
            let task_seed = derive_seed(seed, Stream::Partition, &[t as u64]);
            let shards = dirichlet_partition(&labels, num_clients, beta, task_seed)?;
            tasks.push(
                shards
                    .into_iter()
                    .map(|s| s.into_iter().map(|p| indices[p]).collect())
                    .collect(),
            );
        }
        Ok(Self { beta, tasks })
    }

    pub fn shard(&self, task: usize, client: usize) -> &[usize] {
        &self.tasks[task][client]
    }

    /// Per client, counts of each of the task's classes (in schedule order).
    pub fn class_histograms(&self, dataset: &Dataset, schedule: &TaskSchedule, task: usize) -> Vec<Vec<usize>> {
        let classes = &schedule.tasks[task];
        self.tasks[task]
            .iter()
            .map(|shard| {
                classes
                    .iter()
                    .map(|&c| shard.iter().filter(|&&i| dataset.labels()[i] == c).count())
                    .collect()
            })
            .collect()
    }
}

/// Client ids taking part in a round, ascending. With participation below
/// one, `round(participation · K)` (at least one) clients are drawn from a
/// stream seeded by `(seed, task, round)`.
pub fn select_participants(num_clients: usize, participation: f64, seed: u64, task: usize, round: usize) -> Vec<usize> {
    let m = ((participation * num_clients as f64).round() as usize).clamp(1, num_clients);
    let mut ids: Vec<usize> = (0..num_clients).collect();
    if m < num_clients {
        ids.shuffle(&mut rng_for(seed, Stream::Participation, &[task as u64, round as u64]));
        ids.truncate(m);
        ids.sort_unstable();
    }
    ids
}

/// What a client sends after local training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub b: Vec<LayerB>,
    pub head_rows: DenseMatrix,
    pub n_k: usize,
}

/// A client's proposal for the next task's `A`, one pair per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisCandidate {
    pub client_id: usize,
    pub n_k: usize,
    pub bases: Vec<AdapterBases>,
}

/// Index of a `(layer, projection)` pair in per-client memory and buffer
/// vectors.
pub fn slot(layer: usize, p: Projection) -> usize {
    2 * layer
        + match p {
            Projection::Key => 0,
            Projection::Value => 1,
        }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    /// Dataset indices per task.
    pub shards: Vec<Vec<usize>>,
    memories: Vec<SubspaceMemory>,
    buffers: Vec<ActivationBuffer>,
    reservoir: Vec<Rng>,
    replica: Option<ModelState>,
    seed: u64,
}

impl ClientState {
    pub fn new(client_id: usize, shards: Vec<Vec<usize>>, layers: usize, dim: usize, cap: usize, seed: u64) -> Self {
        let mut buffers = Vec::with_capacity(2 * layers);
        for l in 0..layers {
            for p in Projection::BOTH {
                buffers.push(ActivationBuffer::new(l, p, dim, cap));
            }
        }
        Self {
            client_id,
            shards,
            memories: vec![SubspaceMemory::new(dim); 2 * layers],
            buffers,
            reservoir: Vec::new(),
            replica: None,
            seed,
        }
    }

    pub fn memory(&self, layer: usize, p: Projection) -> &SubspaceMemory {
        &self.memories[slot(layer, p)]
    }

    /// All memories in [`slot`] order.
    pub fn memories(&self) -> &[SubspaceMemory] {
        &self.memories
    }

    pub fn set_memories(&mut self, memories: Vec<SubspaceMemory>) -> Result<()> {
        if memories.len() != self.memories.len() {
            return Err(Error::contract(format!(
                "{} memories supplied, client holds {}",
                memories.len(),
                self.memories.len()
            )));
        }
        self.memories = memories;
        Ok(())
    }

    pub fn buffer(&self, layer: usize, p: Projection) -> &ActivationBuffer {
        &self.buffers[slot(layer, p)]
    }

    pub fn replica(&self) -> Option<&ModelState> {
        self.replica.as_ref()
    }

    pub fn install_replica(&mut self, model: ModelState) {
        self.replica = Some(model);
    }

    pub fn n_k(&self, task: usize) -> usize {
        self.shards.get(task).map_or(0, Vec::len)
    }

    fn reset_buffers(&mut self, stream: Stream, task: usize) {
        for b in &mut self.buffers {
            b.clear();
        }
        self.reservoir = (0..self.buffers.len())
            .map(|s| rng_for(self.seed, stream, &[self.client_id as u64, task as u64, s as u64]))
            .collect();
    }

    fn offer_captured(&mut self, per_layer: &[DenseMatrix]) {
        for (l, rows) in per_layer.iter().enumerate() {
            for i in 0..rows.rows() {
                for p in Projection::BOTH {
                    let s = slot(l, p);
                    self.buffers[s].offer(rows.row(i), &mut self.reservoir[s]);
                }
            }
        }
    }

    fn buffers_empty(&self) -> bool {
        self.buffers.iter().any(ActivationBuffer::is_empty)
    }
}

/// Read-only inputs shared by every client during a run.
#[derive(Debug, Clone, Copy)]
pub struct TrainContext<'a> {
    pub dataset: &'a Dataset,
    /// Head row for every dataset sample.
    pub head_labels: &'a [usize],
    pub num_tasks: usize,
    pub round: RoundConfig,
    pub optimizer: AdamWConfig,
    pub memory: MemoryConfig,
    pub ablation: AblationFlags,
    pub seed: u64,
}

impl TrainContext<'_> {
    fn batch(&self, indices: &[usize]) -> (DenseMatrix, Vec<usize>) {
        (self.dataset.gather(indices), indices.iter().map(|&i| self.head_labels[i]).collect())
    }
}

/// Head row of every sample under `schedule`.
pub fn head_labels(dataset: &Dataset, schedule: &TaskSchedule) -> Result<Vec<usize>> {
    dataset
        .labels()
        .iter()
        .map(|&l| {
            schedule
                .head_index(l)
                .ok_or_else(|| Error::Data(format!("class {l} is not in the schedule")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainLog {
    pub client_id: usize,
    pub n_k: usize,
    /// Mean minibatch loss of each epoch, measured before each step.
    pub epoch_losses: Vec<f64>,
}

/// Copies of the global model for the given clients.
pub fn broadcast(server: &ServerState, client_ids: &[usize]) -> Vec<(usize, ModelState)> {
    client_ids.iter().map(|&id| (id, server.global.clone())).collect()
}

/// `E` epochs of AdamW on the client's shard for `task`, starting from its
/// replica. With `capture`, layer inputs of the last epoch feed the
/// activation buffers. `None` when the shard is empty.
pub fn local_train(
    client: &mut ClientState,
    ctx: &TrainContext<'_>,
    task: usize,
    round: usize,
    capture: bool,
) -> Result<Option<(ClientUpdate, LocalTrainLog)>> {
    let shard = client.shards.get(task).cloned().unwrap_or_default();
    if shard.is_empty() {
        return Ok(None);
    }
    if capture {
        client.reset_buffers(Stream::Reservoir, task);
    }
    let mut model = client
        .replica
        .take()
        .ok_or_else(|| Error::State(format!("client {} has no replica", client.client_id)))?;
    let mut opt = OptimizerState::new(&model, ctx.optimizer)?;
    let range = model.active_class_range();
    let epochs = ctx.round.local_epochs;
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let mut order = shard.clone();
        let stream = [client.client_id as u64, task as u64, round as u64, epoch as u64];
        order.shuffle(&mut rng_for(client.seed, Stream::LocalTrain, &stream));
        let mut total = 0.0;
        for chunk in order.chunks(ctx.round.batch_size) {
            let (x, y) = ctx.batch(chunk);
            if capture && epoch + 1 == epochs {
                let captured = model.forward(&x, true)?.captured.expect("capture requested");
                client.offer_captured(&captured.per_layer);
            }
            let grads = model.loss_and_grads(&x, &y, range.clone())?;
            total += grads.loss * chunk.len() as f64;
            apply_adamw(&mut model, &grads, &mut opt)?;
        }
        epoch_losses.push(total / shard.len() as f64);
    }
    let update = ClientUpdate {
        client_id: client.client_id,
        b: model.trainable_b().expect("adapters installed"),
        head_rows: model.active_head_rows(),
        n_k: shard.len(),
    };
    client.replica = Some(model);
    Ok(Some((
        update,
        LocalTrainLog {
            client_id: client.client_id,
            n_k: shard.len(),
            epoch_losses,
        },
    )))
}

/// Forward-only pass over the shard of `task` filling the activation
/// buffers from `model` (bootstrap of the first `A`).
pub fn calibrate(client: &mut ClientState, model: &ModelState, ctx: &TrainContext<'_>, task: usize) -> Result<()> {
    client.reset_buffers(Stream::Calibration, task);
    let shard = client.shards.get(task).cloned().unwrap_or_default();
    for chunk in shard.chunks(ctx.round.batch_size) {
        let captured = model
            .forward(&ctx.dataset.gather(chunk), true)?
            .captured
            .expect("capture requested");
        client.offer_captured(&captured.per_layer);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AggregatedB {
    pub b: Vec<LayerB>,
    pub head_rows: DenseMatrix,
    pub total_samples: usize,
}

fn weighted_sum<'a>(items: impl Iterator<Item = (f64, &'a DenseMatrix)>) -> DenseMatrix {
    let mut acc: Option<DenseMatrix> = None;
    for (w, m) in items {
        match acc.as_mut() {
            None => acc = Some(m.scale(w)),
            Some(a) => a.axpy(w, m).expect("shapes checked"),
        }
    }
    acc.expect("at least one item")
}

/// `n_k`-weighted mean of every `B` and the head rows, summed in ascending
/// client id order.
pub fn aggregate_b(updates: &[ClientUpdate]) -> Result<AggregatedB> {
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let first = *sorted
        .first()
        .ok_or_else(|| Error::contract("aggregate_b needs at least one update"))?;
    for u in &sorted {
        let same = u.b.len() == first.b.len()
            && u.head_rows.shape() == first.head_rows.shape()
            && u.b.iter().zip(&first.b).all(|(a, b)| a.key.shape() == b.key.shape() && a.value.shape() == b.value.shape());
        if !same {
            return Err(Error::Protocol {
                client: u.client_id,
                reason: "update shapes differ from the other clients".into(),
            });
        }
    }
    let total: usize = sorted.iter().map(|u| u.n_k).sum();
    if total == 0 {
        return Err(Error::contract("aggregate_b needs a positive sample count"));
    }
    let weights: Vec<f64> = sorted.iter().map(|u| u.n_k as f64 / total as f64).collect();
    let b = (0..first.b.len())
        .map(|l| LayerB {
            key: weighted_sum(weights.iter().zip(&sorted).map(|(&w, u)| (w, &u.b[l].key))),
            value: weighted_sum(weights.iter().zip(&sorted).map(|(&w, u)| (w, &u.b[l].value))),
        })
        .collect();
    let head_rows = weighted_sum(weights.iter().zip(&sorted).map(|(&w, u)| (w, &u.head_rows)));
    Ok(AggregatedB {
        b,
        head_rows,
        total_samples: total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryLog {
    pub client_id: usize,
    pub layer: usize,
    pub projection: Projection,
    pub memory_dim: usize,
    pub stored_side: StoredSide,
    pub added: usize,
    pub covered_energy: f64,
    pub saturated: bool,
}

/// Folds the buffered activations of the finished task into every memory.
pub fn update_memories(client: &mut ClientState, cfg: &MemoryConfig, ablation: &AblationFlags) -> Result<Vec<MemoryLog>> {
    let mut logs = Vec::new();
    if client.buffers_empty() {
        return Ok(logs);
    }
    for s in 0..client.memories.len() {
        let buf = &client.buffers[s];
        let (memory, added, covered_energy, saturated) = if ablation.no_memory_update {
            (client.memories[s].clone(), 0, 0.0, false)
        } else {
            let u = client.memories[s].update(buf, cfg)?;
            (u.memory, u.added, u.covered_energy, u.saturated)
        };
        logs.push(MemoryLog {
            client_id: client.client_id,
            layer: buf.layer_id,
            projection: buf.projection,
            memory_dim: memory.memory_dim(),
            stored_side: memory.stored_side(),
            added,
            covered_energy,
            saturated,
        });
        client.memories[s] = memory;
    }
    Ok(logs)
}

/// Selects a rank-`rank` basis orthogonal to each memory from the buffered
/// activations, then clears the buffers. `None` if nothing was buffered.
pub fn propose_bases(client: &mut ClientState, rank: usize, task: usize) -> Result<Option<BasisCandidate>> {
    if client.buffers_empty() {
        return Ok(None);
    }
    let layers = client.memories.len() / 2;
    let mut bases = Vec::with_capacity(layers);
    for l in 0..layers {
        let pick = |p: Projection| {
            let s = slot(l, p);
            client.memories[s]
                .select_adapter_basis(&client.buffers[s], rank)
                .map_err(|e| match e {
                    Error::CapacityExhausted {
                        requested,
                        available,
                        context,
                    } => Error::CapacityExhausted {
                        requested,
                        available,
                        context: format!("{context} on client {}", client.client_id),
                    },
                    other => other,
                })
        };
        let key = pick(Projection::Key)?;
        let value = pick(Projection::Value)?;
        bases.push(AdapterBases { key, value });
    }
    for b in &mut client.buffers {
        b.clear();
    }
    Ok(Some(BasisCandidate {
        client_id: client.client_id,
        n_k: client.n_k(task),
        bases,
    }))
}

/// Memory update followed by basis selection against the updated memory.
pub fn client_next_a(
    client: &mut ClientState,
    cfg: &MemoryConfig,
    ablation: &AblationFlags,
    task: usize,
) -> Result<(Option<BasisCandidate>, Vec<MemoryLog>)> {
    let logs = update_memories(client, cfg, ablation)?;
    Ok((propose_bases(client, cfg.rank, task)?, logs))
}

/// A deficient column of an averaged basis replaced by a random direction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankRepair {
    pub task: usize,
    pub layer: usize,
    pub projection: Projection,
    pub column: usize,
}

/// Orthonormalizes `m` column by column. Columns whose residual against the
/// previously accepted ones falls below [`REPAIR_THRESHOLD`] are replaced by
/// a Gaussian direction drawn from `rng` and projected onto the complement.
/// Returns the basis and the replaced column indices.
pub fn orthonormalize_with_repair(m: &DenseMatrix, rng: &mut Rng) -> Result<(DenseMatrix, Vec<usize>)> {
    match qr_orthonormalize(m) {
        Ok(q) => return Ok((q, Vec::new())),
        Err(Error::RankDeficient { .. }) => {}
        Err(e) => return Err(e),
    }
    let d = m.rows();
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(m.cols());
    let mut repaired = Vec::new();
    let residual = |v: Vec<f64>, accepted: &[Vec<f64>]| -> Result<Vec<f64>> {
        let basis = DenseMatrix::from_columns(d, accepted);
        let col = DenseMatrix::from_columns(d, &[v]);
        Ok(project_complement(&basis, &col)?.column(0))
    };
    for j in 0..m.cols() {
        let mut v = residual(m.column(j), &accepted)?;
        let mut norm = dot(&v, &v).sqrt();
        if norm < REPAIR_THRESHOLD {
            repaired.push(j);
            loop {
                v = residual(gaussian_matrix(rng, d, 1, 1.0).column(0), &accepted)?;
                norm = dot(&v, &v).sqrt();
                if norm >= REPAIR_THRESHOLD {
                    break;
                }
            }
        }
        accepted.push(v.iter().map(|x| x / norm).collect());
    }
    Ok((qr_orthonormalize(&DenseMatrix::from_columns(d, &accepted))?, repaired))
}

/// Mean of the candidates (unweighted unless `weighted`), re-orthonormalized.
/// A single candidate is already orthonormal and is returned unchanged.
pub fn aggregate_a(
    candidates: &[BasisCandidate],
    weighted: bool,
    seed: u64,
    task: usize,
) -> Result<(Vec<AdapterBases>, Vec<RankRepair>)> {
    let mut sorted: Vec<&BasisCandidate> = candidates.iter().collect();
    sorted.sort_by_key(|c| c.client_id);
    let first = *sorted
        .first()
        .ok_or_else(|| Error::contract("aggregate_a needs at least one candidate"))?;
    for c in &sorted {
        let same = c.bases.len() == first.bases.len()
            && c.bases.iter().zip(&first.bases).all(|(a, b)| a.key.shape() == b.key.shape() && a.value.shape() == b.value.shape());
        if !same {
            return Err(Error::Protocol {
                client: c.client_id,
                reason: "basis candidate shapes differ from the other clients".into(),
            });
        }
    }
    if sorted.len() == 1 {
        return Ok((first.bases.clone(), Vec::new()));
    }
    let weights: Vec<f64> = if weighted {
        let total: usize = sorted.iter().map(|c| c.n_k).sum();
        if total == 0 {
            return Err(Error::contract("weighted basis averaging needs a positive sample count"));
        }
        sorted.iter().map(|c| c.n_k as f64 / total as f64).collect()
    } else {
        vec![1.0 / sorted.len() as f64; sorted.len()]
    };
    let mut repairs = Vec::new();
    let mut out = Vec::with_capacity(first.bases.len());
    for l in 0..first.bases.len() {
        let mut pair = Vec::with_capacity(2);
        for p in Projection::BOTH {
            let mean = weighted_sum(weights.iter().zip(&sorted).map(|(&w, c)| (w, c.bases[l].get(p))));
            let mut rng = rng_for(seed, Stream::RankRepair, &[task as u64, slot(l, p) as u64]);
            let (q, cols) = orthonormalize_with_repair(&mean, &mut rng)?;
            repairs.extend(cols.into_iter().map(|column| RankRepair {
                task,
                layer: l,
                projection: p,
                column,
            }));
            pair.push(q);
        }
        let value = pair.pop().expect("two projections");
        let key = pair.pop().expect("two projections");
        out.push(AdapterBases { key, value });
    }
    Ok((out, repairs))
}

/// Seeded random orthonormal bases (the `random_a` ablation).
pub fn random_bases(seed: u64, task: usize, layers: usize, dim: usize, rank: usize) -> Result<Vec<AdapterBases>> {
    (0..layers)
        .map(|l| {
            let draw = |p: Projection| {
                let mut rng = rng_for(seed, Stream::RandomAdapter, &[task as u64, slot(l, p) as u64]);
                qr_orthonormalize(&gaussian_matrix(&mut rng, dim, rank, 1.0))
            };
            Ok(AdapterBases {
                key: draw(Projection::Key)?,
                value: draw(Projection::Value)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub task: usize,
    pub round: usize,
    pub participants: Vec<usize>,
    pub clients: Vec<LocalTrainLog>,
    /// Selected clients without data for the task.
    pub skipped: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: usize,
    pub classes: Vec<usize>,
    pub rounds: Vec<RoundLog>,
    pub memory: Vec<MemoryLog>,
    pub rank_repairs: Vec<RankRepair>,
    pub accuracy_row: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: ModelState,
    pub schedule: TaskSchedule,
    pub accuracy: AccuracyMatrix,
    pub comm: CommLedger,
    pub round_log: Vec<RoundLog>,
    /// Bases to install at the start of the next task.
    pub next_bases: Option<Vec<AdapterBases>>,
    /// Candidates received at the most recent task boundary.
    pub last_candidates: Vec<BasisCandidate>,
}

impl ServerState {
    pub fn new(global: ModelState, schedule: TaskSchedule) -> Self {
        let tasks = schedule.num_tasks();
        Self {
            global,
            schedule,
            accuracy: AccuracyMatrix::new(tasks),
            comm: CommLedger::default(),
            round_log: Vec::new(),
            next_bases: None,
            last_candidates: Vec::new(),
        }
    }
}

fn collect_candidates(
    server: &mut ServerState,
    clients: &mut [ClientState],
    ctx: &TrainContext<'_>,
    task: usize,
) -> Result<(Vec<BasisCandidate>, Vec<MemoryLog>)> {
    let results: Vec<(Option<BasisCandidate>, Vec<MemoryLog>)> = clients
        .par_iter_mut()
        .map(|c| client_next_a(c, &ctx.memory, &ctx.ablation, task))
        .collect::<Result<_>>()?;
    let mut candidates = Vec::new();
    let mut logs = Vec::new();
    for (cand, mem) in results {
        candidates.extend(cand);
        logs.extend(mem);
    }
    server.last_candidates = candidates.clone();
    Ok((candidates, logs))
}

/// Bases for the first task: random under `random_a`, otherwise averaged
/// from proposals on a forward-only pass over each client's first shard.
fn bootstrap_bases(
    server: &mut ServerState,
    clients: &mut [ClientState],
    ctx: &TrainContext<'_>,
    report: &mut TaskReport,
) -> Result<Vec<AdapterBases>> {
    let cfg = *server.global.config();
    let rank = ctx.memory.rank;
    if ctx.ablation.random_a {
        return random_bases(ctx.seed, 0, cfg.num_layers, cfg.embed_dim, rank);
    }
    let global = &server.global;
    let candidates: Vec<BasisCandidate> = clients
        .par_iter_mut()
        .map(|c| {
            calibrate(c, global, ctx, 0)?;
            propose_bases(c, rank, 0)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let upload = cfg.num_layers as u64 * adapter_pair_params(rank, cfg.embed_dim);
    for c in &candidates {
        server.comm.push(CommEntry::new(0, CommPhase::Bootstrap, c.client_id, upload, 0));
    }
    server.last_candidates = candidates.clone();
    let (bases, repairs) = aggregate_a(&candidates, ctx.ablation.weighted_a_avg, ctx.seed, 0)?;
    report.rank_repairs.extend(repairs);
    Ok(bases)
}

/// One task of the protocol: rounds of broadcast, local training and `B`
/// aggregation; merge; memory update and next-`A` selection on the clients;
/// `A` aggregation; evaluation on every task seen so far.
pub fn run_task(server: &mut ServerState, clients: &mut [ClientState], ctx: &TrainContext<'_>, task: usize) -> Result<TaskReport> {
    let cfg = *server.global.config();
    let rank = ctx.memory.rank;
    let classes = server.schedule.tasks[task].clone();
    let mut report = TaskReport {
        task,
        classes: classes.clone(),
        rounds: Vec::new(),
        memory: Vec::new(),
        rank_repairs: Vec::new(),
        accuracy_row: Vec::new(),
    };
    let bases = match server.next_bases.take() {
        Some(b) => b,
        None if task == 0 => bootstrap_bases(server, clients, ctx, &mut report)?,
        None => return Err(Error::State(format!("no adapter bases prepared for task {task}"))),
    };
    server.global.begin_task(&bases, classes.len())?;

    let rounds = ctx.round.rounds_per_task;
    let last_task = task + 1 == ctx.num_tasks;
    let basis_upload = cfg.num_layers as u64 * adapter_pair_params(rank, cfg.embed_dim);
    for round in 0..rounds {
        let participants = select_participants(clients.len(), ctx.round.participation, ctx.seed, task, round);
        for (id, replica) in broadcast(server, &participants) {
            clients[id].install_replica(replica);
        }
        let capture = round + 1 == rounds;
        let results: Vec<Option<(ClientUpdate, LocalTrainLog)>> = clients
            .par_iter_mut()
            .filter(|c| participants.contains(&c.client_id))
            .map(|c| local_train(c, ctx, task, round, capture))
            .collect::<Result<_>>()?;
        let mut updates = Vec::new();
        let mut logs = Vec::new();
        let mut skipped = Vec::new();
        for (id, r) in participants.iter().zip(results) {
            match r {
                Some((u, log)) => {
                    updates.push(u);
                    logs.push(log);
                }
                None => skipped.push(*id),
            }
        }
        if updates.is_empty() {
            return Err(Error::Data(format!("no participant holds data for task {task} round {round}")));
        }
        let agg = aggregate_b(&updates)?;
        server.global.install_trainable(&agg.b, &agg.head_rows)?;

        let download = round_download_params(cfg.num_layers, rank, cfg.embed_dim, server.global.num_classes());
        let boundary = capture && !last_task && !ctx.ablation.random_a;
        for u in &updates {
            let up = round_upload_params(cfg.num_layers, rank, cfg.embed_dim, classes.len())
                + if boundary { basis_upload } else { 0 };
            server.comm.push(CommEntry::new(task, CommPhase::Round(round), u.client_id, up, download));
        }
        let log = RoundLog {
            task,
            round,
            participants,
            clients: logs,
            skipped,
        };
        server.round_log.push(log.clone());
        report.rounds.push(log);
    }
    server.global.merge_current_task()?;

    if last_task {
        let logs: Vec<Vec<MemoryLog>> = clients
            .par_iter_mut()
            .map(|c| update_memories(c, &ctx.memory, &ctx.ablation))
            .collect::<Result<_>>()?;
        report.memory = logs.into_iter().flatten().collect();
    } else {
        let (candidates, logs) = collect_candidates(server, clients, ctx, task)?;
        report.memory = logs;
        let next = if ctx.ablation.random_a {
            random_bases(ctx.seed, task + 1, cfg.num_layers, cfg.embed_dim, rank)?
        } else {
            let (b, repairs) = aggregate_a(&candidates, ctx.ablation.weighted_a_avg, ctx.seed, task + 1)?;
            report.rank_repairs.extend(repairs);
            b
        };
        server.next_bases = Some(next);
    }

    let row = evaluate(&server.global, ctx.dataset, &server.schedule, task)?;
    server.accuracy.push_row(row.clone())?;
    report.accuracy_row = row;
    Ok(report)
}

/// Loads or generates the dataset described by `config` for a run seed.
pub fn load_dataset(config: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    let ds = match &config.data {
        DataConfig::Synthetic(s) => generate_synthetic(&crate::data::SyntheticConfig { seed, ..*s })?,
        other => ingest_raster(&other.raster_source().expect("raster variant"))?,
    };
    if ds.input_dim() != config.backbone.input_dim {
        return Err(Error::config(format!(
            "dataset has {} features, backbone expects {}",
            ds.input_dim(),
            config.backbone.input_dim
        )));
    }
    ds.validate_for_clients(config.round.num_clients)?;
    Ok(ds)
}

/// Everything a single-seed run holds.
#[derive(Debug, Clone)]
pub struct Federation {
    pub seed: u64,
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub plan: PartitionPlan,
    pub head_labels: Vec<usize>,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
}

impl Federation {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let dataset = load_dataset(config, seed)?;
        Self::with_dataset(config, seed, dataset)
    }

    pub fn with_dataset(config: &ExperimentConfig, seed: u64, dataset: Dataset) -> Result<Self> {
        let k = config.round.num_clients;
        let schedule = build_schedule(dataset.num_classes(), config.experiment.num_tasks, seed)?;
        let plan = PartitionPlan::build(&dataset, &schedule, k, config.partition.beta, seed)?;
        let head_labels = head_labels(&dataset, &schedule)?;
        let backbone = Backbone::init(config.backbone, seed)?;
        let d = config.backbone.embed_dim;
        let clients = (0..k)
            .map(|c| {
                let shards = plan.tasks.iter().map(|t| t[c].clone()).collect();
                ClientState::new(c, shards, config.backbone.num_layers, d, config.memory.activation_cap, seed)
            })
            .collect();
        Ok(Self {
            seed,
            config: config.clone(),
            dataset,
            plan,
            head_labels,
            server: ServerState::new(ModelState::new(backbone), schedule),
            clients,
        })
    }

    pub fn context(&self) -> TrainContext<'_> {
        TrainContext {
            dataset: &self.dataset,
            head_labels: &self.head_labels,
            num_tasks: self.config.experiment.num_tasks,
            round: self.config.round,
            optimizer: self.config.optimizer,
            memory: self.config.memory,
            ablation: self.config.ablation,
            seed: self.seed,
        }
    }

    pub fn run_task(&mut self, task: usize) -> Result<TaskReport> {
        let ctx = TrainContext {
            dataset: &self.dataset,
            head_labels: &self.head_labels,
            num_tasks: self.config.experiment.num_tasks,
            round: self.config.round,
            optimizer: self.config.optimizer,
            memory: self.config.memory,
            ablation: self.config.ablation,
            seed: self.seed,
        };
        run_task(&mut self.server, &mut self.clients, &ctx, task)
    }

    /// Runs every task and assembles the run report.
    pub fn run_all(&mut self) -> Result<RunReport> {
        let tasks = (0..self.config.experiment.num_tasks)
            .map(|t| self.run_task(t))
            .collect::<Result<Vec<_>>>()?;
        let accuracy = self.server.accuracy.clone();
        Ok(RunReport {
            seed: self.seed,
            schedule: self.server.schedule.clone(),
            shard_sizes: self
                .plan
                .tasks
                .iter()
                .map(|t| t.iter().map(Vec::len).collect())
                .collect(),
            faa: faa(&accuracy)?,
            forgetting: forgetting(&accuracy),
            backward_transfer: backward_transfer(&accuracy),
            accuracy,
            tasks,
            comm: self.server.comm.clone(),
            model_checksum: self.server.global.checksum(),
        })
    }
}

/// Seeds of the runs in an experiment: `seed, seed + 1, ..`.
pub fn run_seeds(config: &ExperimentConfig) -> Vec<u64> {
    (0..config.experiment.repeats as u64)
        .map(|i| config.experiment.seed.wrapping_add(i))
        .collect()
}

/// Runs every seed and returns the report together with the final state of
/// the last run.
pub fn run_experiment_with_state(config: &ExperimentConfig) -> Result<(ExperimentReport, Federation)> {
    config.validate()?;
    let mut runs = Vec::new();
    let mut last = None;
    for seed in run_seeds(config) {
        let mut fed = Federation::new(config, seed)?;
        runs.push(fed.run_all()?);
        last = Some(fed);
    }
    Ok((ExperimentReport::new(config.clone(), runs), last.expect("at least one repeat")))
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    run_experiment_with_state(config).map(|(r, _)| r)
}
