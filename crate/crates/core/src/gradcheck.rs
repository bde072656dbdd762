//! Central finite-difference check of [`ModelState::loss_and_grads`].
//!
//! The numeric side only ever calls [`ModelState::loss`], which shares the
//! forward pass but none of the backward code.

use serde::Serialize;

use crate::error::Result;
use crate::linalg::{qr_orthonormalize, DenseMatrix};
use crate::model::{AdapterBases, Backbone, BackboneConfig, ModelState};
use crate::rng::{gaussian_matrix, rng_for, Stream};
use crate::subspace_memory::Projection;

/// Denominator floor for relative errors of near-zero gradient entries.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Tensor {
    BKey(usize),
    BValue(usize),
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorReport {
    pub tensor: Tensor,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorReport>,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckSetup {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_tokens: usize,
    pub rank: usize,
    pub classes: usize,
    pub batch: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradCheckSetup {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            num_layers: 2,
            num_tokens: 4,
            rank: 2,
            classes: 3,
            batch: 4,
            step: 1e-5,
            seed: 7,
        }
    }
}

/// Builds a random model with nonzero `B` and head, so every gradient path
/// carries signal, then compares analytic and numeric gradients.
pub fn run_gradcheck(setup: &GradCheckSetup) -> Result<GradCheckReport> {
    let cfg = BackboneConfig {
        embed_dim: setup.embed_dim,
        num_layers: setup.num_layers,
        num_tokens: setup.num_tokens,
        input_dim: 2 * (setup.num_tokens - 1),
        mlp_hidden: 2 * setup.embed_dim,
    };
    let mut model = ModelState::new(Backbone::init(cfg, setup.seed)?);
    let mut rng = rng_for(setup.seed, Stream::RandomAdapter, &[]);
    let d = setup.embed_dim;
    let bases: Vec<AdapterBases> = (0..cfg.num_layers)
        .map(|_| {
            Ok(AdapterBases {
                key: qr_orthonormalize(&gaussian_matrix(&mut rng, d, setup.rank, 1.0))?,
                value: qr_orthonormalize(&gaussian_matrix(&mut rng, d, setup.rank, 1.0))?,
            })
        })
        .collect::<Result<_>>()?;
    model.begin_task(&bases, setup.classes)?;
    for ad in model.adapters_mut().expect("just installed") {
        ad.key.b = gaussian_matrix(&mut rng, setup.rank, d, 0.5);
        ad.value.b = gaussian_matrix(&mut rng, setup.rank, d, 0.5);
    }
    *model.head_mut() = gaussian_matrix(&mut rng, setup.classes, d, 1.0);
    let batch = gaussian_matrix(&mut rng, setup.batch, cfg.input_dim, 1.0);
    let labels: Vec<usize> = (0..setup.batch).map(|i| i % setup.classes).collect();
    check_gradients(&model, &batch, &labels, setup.step)
}

/// Compares analytic gradients over the active class range against central
/// differences with the given step.
pub fn check_gradients(
    model: &ModelState,
    batch: &DenseMatrix,
    labels: &[usize],
    step: f64,
) -> Result<GradCheckReport> {
    let range = model.active_class_range();
    let analytic = model.loss_and_grads(batch, labels, range.clone())?;
    let layers = model.config().num_layers;

    let mut tensors = Vec::new();
    for l in 0..layers {
        for p in Projection::BOTH {
            let (tensor, grad) = match p {
                Projection::Key => (Tensor::BKey(l), &analytic.b_key[l]),
                Projection::Value => (Tensor::BValue(l), &analytic.b_value[l]),
            };
            let report = compare(tensor, grad, |delta, idx| {
                let mut m = model.clone();
                let b = &mut m.adapters_mut().expect("adapters present")[l].get_mut(p).b;
                b.data_mut()[idx] += delta;
                m.loss(batch, labels, range.clone())
            }, step)?;
            tensors.push(report);
        }
    }
    let head_offset = range.start * model.config().embed_dim;
    tensors.push(compare(Tensor::Head, &analytic.head, |delta, idx| {
        let mut m = model.clone();
        m.head_mut().data_mut()[head_offset + idx] += delta;
        m.loss(batch, labels, range.clone())
    }, step)?);

    let max_rel_error = tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        tensors,
        max_rel_error,
    })
}

fn compare(
    tensor: Tensor,
    grad: &DenseMatrix,
    loss_at: impl Fn(f64, usize) -> Result<f64>,
    step: f64,
) -> Result<TensorReport> {
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for (idx, &a) in grad.data().iter().enumerate() {
        let numeric = (loss_at(step, idx)? - loss_at(-step, idx)?) / (2.0 * step);
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
        max_rel = max_rel.max(rel);
        max_abs = max_abs.max(abs);
    }
    Ok(TensorReport {
        tensor,
        entries: grad.data().len(),
        max_rel_error: max_rel,
        max_abs_error: max_abs,
    })
}
