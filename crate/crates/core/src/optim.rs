//! AdamW with decoupled weight decay over the trainable tensors of a
//! [`ModelState`]: each layer's `B_K`, `B_V`, and the active head rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::model::{GradientSet, ModelState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub adapter_lr: f64,
    pub head_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            adapter_lr: 3e-3,
            head_lr: 3e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: DenseMatrix,
    second: DenseMatrix,
}

impl Moments {
    fn zeros_like(m: &DenseMatrix) -> Self {
        Self {
            first: DenseMatrix::zeros(m.rows(), m.cols()),
            second: DenseMatrix::zeros(m.rows(), m.cols()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    step: u64,
    b_key: Vec<Moments>,
    b_value: Vec<Moments>,
    head: Moments,
}

impl OptimizerState {
    /// Zero moments shaped after the model's current trainable tensors.
    pub fn new(model: &ModelState, config: AdamWConfig) -> Result<Self> {
        let adapters = model
            .adapters()
            .ok_or_else(|| Error::State("optimizer needs installed adapters".into()))?;
        Ok(Self {
            config,
            step: 0,
            b_key: adapters.iter().map(|a| Moments::zeros_like(&a.key.b)).collect(),
            b_value: adapters.iter().map(|a| Moments::zeros_like(&a.value.b)).collect(),
            head: Moments::zeros_like(&model.active_head_rows()),
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

fn adamw_update(
    param: &mut [f64],
    grad: &DenseMatrix,
    moments: &mut Moments,
    lr: f64,
    cfg: &AdamWConfig,
    step: u64,
) -> Result<()> {
    if param.len() != grad.data().len() || moments.first.data().len() != grad.data().len() {
        return Err(Error::Dimension {
            op: "apply_adamw",
            left: moments.first.shape(),
            right: grad.shape(),
        });
    }
    let bias1 = 1.0 - cfg.beta1.powi(step as i32);
    let bias2 = 1.0 - cfg.beta2.powi(step as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    let m = moments.first.data_mut();
    let v = moments.second.data_mut();
    for (i, (p, &g)) in param.iter_mut().zip(grad.data()).enumerate() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        *p = *p * decay - lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// One AdamW step on every trainable tensor. Frozen weights and head rows
/// of earlier tasks are never touched.
pub fn apply_adamw(model: &mut ModelState, grads: &GradientSet, opt: &mut OptimizerState) -> Result<()> {
    opt.step += 1;
    let step = opt.step;
    let cfg = opt.config;
    let range = model.active_class_range();
    {
        let adapters = model
            .adapters_mut()
            .ok_or_else(|| Error::State("no adapters to optimize".into()))?;
        if adapters.len() != grads.b_key.len() || adapters.len() != grads.b_value.len() {
            return Err(Error::contract("gradient layer count does not match the model"));
        }
        for (l, ad) in adapters.iter_mut().enumerate() {
            adamw_update(ad.key.b.data_mut(), &grads.b_key[l], &mut opt.b_key[l], cfg.adapter_lr, &cfg, step)?;
            adamw_update(ad.value.b.data_mut(), &grads.b_value[l], &mut opt.b_value[l], cfg.adapter_lr, &cfg, step)?;
        }
    }
    let d = model.config().embed_dim;
    let head = model.head_mut();
    let rows = &mut head.data_mut()[range.start * d..range.end * d];
    adamw_update(rows, &grads.head, &mut opt.head, cfg.head_lr, &cfg, step)
}
