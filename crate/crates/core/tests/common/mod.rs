#![allow(dead_code)]

use dolfin::config::ExperimentConfig;
use dolfin::linalg::DenseMatrix;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Three tasks of two classes, two clients, small backbone.
pub const SMALL: &str = r#"
[experiment]
seed = 1
num_tasks = 3

[backbone]
embed_dim = 32
num_layers = 2
num_tokens = 5
input_dim = 128
mlp_hidden = 64

[round]
num_clients = 2
local_epochs = 5
batch_size = 16

[partition]
beta = 1.0

[optimizer]
adapter_lr = 0.01
head_lr = 0.003

[data]
source = "synthetic"
num_classes = 6
samples_per_class = 60
input_dim = 128
cluster_spread = 0.5
cluster_separation = 10.0
"#;

pub fn small_config() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(SMALL).expect("valid config")
}

/// Same shape as [`small_config`] but cheaper: fewer samples and epochs.
pub fn tiny_config(clients: usize, tasks: usize) -> ExperimentConfig {
    let mut cfg = small_config();
    cfg.round.num_clients = clients;
    cfg.round.local_epochs = 2;
    cfg.experiment.num_tasks = tasks;
    cfg.backbone.embed_dim = 16;
    cfg.backbone.mlp_hidden = 32;
    if let dolfin::config::DataConfig::Synthetic(s) = &mut cfg.data {
        s.num_classes = 2 * tasks;
        s.samples_per_class = 30;
    }
    cfg
}

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::StandardNormal;
    DenseMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(normal))
}

/// Result of training one model on the pooled data of every task.
pub struct Centralized {
    pub rows: Vec<Vec<f64>>,
    pub model: dolfin::model::ModelState,
    pub memories: Vec<dolfin::subspace_memory::SubspaceMemory>,
}

/// Sequential training without any federation, written against the model,
/// optimizer and memory APIs directly. It draws from the same seeded
/// streams a lone client with id 0 would use.
pub fn centralized(cfg: &ExperimentConfig, seed: u64) -> Centralized {
    use dolfin::data::{build_schedule, Split};
    use dolfin::federated::{head_labels, load_dataset};
    use dolfin::metrics::evaluate;
    use dolfin::model::{AdapterBases, Backbone, ModelState};
    use dolfin::optim::{apply_adamw, OptimizerState};
    use dolfin::rng::{rng_for, Stream};
    use dolfin::subspace_memory::{ActivationBuffer, Projection, SubspaceMemory};
    use rand::seq::SliceRandom;

    let dataset = load_dataset(cfg, seed).unwrap();
    let schedule = build_schedule(dataset.num_classes(), cfg.experiment.num_tasks, seed).unwrap();
    let heads = head_labels(&dataset, &schedule).unwrap();
    let layers = cfg.backbone.num_layers;
    let d = cfg.backbone.embed_dim;
    let mem_cfg = cfg.memory;
    let mut model = ModelState::new(Backbone::init(cfg.backbone, seed).unwrap());
    let mut memories = vec![SubspaceMemory::new(d); 2 * layers];

    let fresh_buffers = |stream: Stream, task: usize| {
        let mut bufs = Vec::new();
        let mut rngs = Vec::new();
        for l in 0..layers {
            for p in [Projection::Key, Projection::Value] {
                rngs.push(rng_for(seed, stream, &[0, task as u64, bufs.len() as u64]));
                bufs.push(ActivationBuffer::new(l, p, d, mem_cfg.activation_cap));
            }
        }
        (bufs, rngs)
    };
    let offer = |model: &ModelState, x: &DenseMatrix, bufs: &mut Vec<ActivationBuffer>, rngs: &mut Vec<ChaCha8Rng>| {
        let captured = model.forward(x, true).unwrap().captured.unwrap();
        for (l, rows) in captured.per_layer.iter().enumerate() {
            for i in 0..rows.rows() {
                for s in [2 * l, 2 * l + 1] {
                    bufs[s].offer(rows.row(i), &mut rngs[s]);
                }
            }
        }
    };
    let select = |memories: &[SubspaceMemory], bufs: &[ActivationBuffer]| -> Vec<AdapterBases> {
        (0..layers)
            .map(|l| AdapterBases {
                key: memories[2 * l].select_adapter_basis(&bufs[2 * l], mem_cfg.rank).unwrap(),
                value: memories[2 * l + 1].select_adapter_basis(&bufs[2 * l + 1], mem_cfg.rank).unwrap(),
            })
            .collect()
    };

    let tasks = cfg.experiment.num_tasks;
    let epochs = cfg.round.local_epochs;
    let mut rows = Vec::new();
    let mut bases = None;
    for t in 0..tasks {
        let shard = dataset.indices_for(Split::Train, &schedule.tasks[t]);
        if t == 0 {
            let (mut bufs, mut rngs) = fresh_buffers(Stream::Calibration, 0);
            for chunk in shard.chunks(cfg.round.batch_size) {
                offer(&model, &dataset.gather(chunk), &mut bufs, &mut rngs);
            }
            bases = Some(select(&memories, &bufs));
        }
        model.begin_task(bases.as_ref().unwrap(), schedule.tasks[t].len()).unwrap();
        let range = model.active_class_range();
        let mut opt = OptimizerState::new(&model, cfg.optimizer).unwrap();
        let (mut bufs, mut rngs) = fresh_buffers(Stream::Reservoir, t);
        for epoch in 0..epochs {
            let mut order = shard.clone();
            order.shuffle(&mut rng_for(seed, Stream::LocalTrain, &[0, t as u64, 0, epoch as u64]));
            for chunk in order.chunks(cfg.round.batch_size) {
                let x = dataset.gather(chunk);
                let y: Vec<usize> = chunk.iter().map(|&i| heads[i]).collect();
                if epoch + 1 == epochs {
                    offer(&model, &x, &mut bufs, &mut rngs);
                }
                let grads = model.loss_and_grads(&x, &y, range.clone()).unwrap();
                apply_adamw(&mut model, &grads, &mut opt).unwrap();
            }
        }
        model.merge_current_task().unwrap();
        for (m, b) in memories.iter_mut().zip(&bufs) {
            *m = m.update(b, &mem_cfg).unwrap().memory;
        }
        if t + 1 < tasks {
            bases = Some(select(&memories, &bufs));
        }
        rows.push(evaluate(&model, &dataset, &schedule, t).unwrap());
    }
    Centralized { rows, model, memories }
}
