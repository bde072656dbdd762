//! Frozen attention backbone with per-task LoRA branches on the key and
//! value projections.
//!
//! Tokens are row vectors and every projection is applied on the right:
//!
//! ```text
//! Q = X W_Q
//! K = X (W_K + ΔK) + (X A_K) B_K
//! V = X (W_V + ΔV) + (X A_V) B_V
//! X1 = X + softmax(Q Kᵀ / √d) V W_O
//! X2 = X1 + gelu(X1 W_1) W_2
//! ```
//!
//! `ΔK`, `ΔV` accumulate `A·B` of every finished task. With tokens on the
//! left, `A` acts on the input side: a token orthogonal to `span(A)` is
//! untouched by any `B`. Logits are `head · cls`, where `cls` is the class
//! token row after the last layer.
//!
//! Gradients are computed by hand-written reverse mode, only for `B_K`,
//! `B_V` and the head rows of the active classes.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{check_orthonormal, DenseMatrix};
use crate::rng::{gaussian_matrix, rng_for, Stream};
use crate::subspace_memory::Projection;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    /// Tokens per sample, including the class token.
    pub num_tokens: usize,
    pub input_dim: usize,
    pub mlp_hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            num_layers: 2,
            num_tokens: 5,
            input_dim: 128,
            mlp_hidden: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 {
            return Err(Error::config("embed_dim must be at least 2"));
        }
        if self.num_layers == 0 || self.mlp_hidden == 0 || self.input_dim == 0 {
            return Err(Error::config("num_layers, mlp_hidden and input_dim must be positive"));
        }
        if self.num_tokens < 2 {
            return Err(Error::config("num_tokens must leave room for one patch token"));
        }
        if !self.input_dim.is_multiple_of(self.num_tokens - 1) {
            return Err(Error::config(format!(
                "input_dim {} is not divisible by the {} patch tokens",
                self.input_dim,
                self.num_tokens - 1
            )));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.input_dim / (self.num_tokens - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenLayer {
    pub w_q: DenseMatrix,
    pub w_k: DenseMatrix,
    pub w_v: DenseMatrix,
    pub w_o: DenseMatrix,
    /// `d × mlp_hidden`
    pub w_1: DenseMatrix,
    /// `mlp_hidden × d`
    pub w_2: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub layers: Vec<FrozenLayer>,
    /// `patch_dim × d`
    pub patch_embed: DenseMatrix,
    /// `1 × d`
    pub class_token: DenseMatrix,
}

impl Backbone {
    /// Random frozen backbone; all weights i.i.d. `N(0, 1/d)`.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let std = 1.0 / (d as f64).sqrt();
        let mut rng = rng_for(seed, Stream::Backbone, &[]);
        let patch_embed = gaussian_matrix(&mut rng, config.patch_dim(), d, std);
        let class_token = gaussian_matrix(&mut rng, 1, d, std);
        let layers = (0..config.num_layers)
            .map(|_| FrozenLayer {
                w_q: gaussian_matrix(&mut rng, d, d, std),
                w_k: gaussian_matrix(&mut rng, d, d, std),
                w_v: gaussian_matrix(&mut rng, d, d, std),
                w_o: gaussian_matrix(&mut rng, d, d, std),
                w_1: gaussian_matrix(&mut rng, d, config.mlp_hidden, std),
                w_2: gaussian_matrix(&mut rng, config.mlp_hidden, d, std),
            })
            .collect();
        Ok(Self {
            config,
            layers,
            patch_embed,
            class_token,
        })
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &DenseMatrix)> {
        let mut out = vec![
            ("backbone.patch_embed".to_string(), &self.patch_embed),
            ("backbone.class_token".to_string(), &self.class_token),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("w_q", &layer.w_q),
                ("w_k", &layer.w_k),
                ("w_v", &layer.w_v),
                ("w_o", &layer.w_o),
                ("w_1", &layer.w_1),
                ("w_2", &layer.w_2),
            ] {
                out.push((format!("backbone.layer{l}.{name}"), t));
            }
        }
        out
    }

    pub fn checksum(&self) -> String {
        checksum_of(self.tensors().into_iter().map(|(_, t)| t))
    }
}

/// SHA-256 over the little-endian bit patterns of the given tensors.
pub fn checksum_of<'a>(tensors: impl IntoIterator<Item = &'a DenseMatrix>) -> String {
    let mut hasher = Sha256::new();
    for t in tensors {
        hasher.update((t.rows() as u64).to_le_bytes());
        hasher.update((t.cols() as u64).to_le_bytes());
        for v in t.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// `d × r`, frozen, orthonormal columns.
    pub a: DenseMatrix,
    /// `r × d`, trainable.
    pub b: DenseMatrix,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn delta(&self) -> DenseMatrix {
        self.a.matmul(&self.b).expect("adapter factor shapes agree")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAdapters {
    pub key: LoraAdapter,
    pub value: LoraAdapter,
}

impl LayerAdapters {
    pub fn get(&self, p: Projection) -> &LoraAdapter {
        match p {
            Projection::Key => &self.key,
            Projection::Value => &self.value,
        }
    }

    pub fn get_mut(&mut self, p: Projection) -> &mut LoraAdapter {
        match p {
            Projection::Key => &mut self.key,
            Projection::Value => &mut self.value,
        }
    }
}

/// Frozen `A` factors for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterBases {
    pub key: DenseMatrix,
    pub value: DenseMatrix,
}

impl AdapterBases {
    pub fn get(&self, p: Projection) -> &DenseMatrix {
        match p {
            Projection::Key => &self.key,
            Projection::Value => &self.value,
        }
    }
}

/// The trainable `B` factors for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerB {
    pub key: DenseMatrix,
    pub value: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    backbone: Arc<Backbone>,
    merged_key: Vec<DenseMatrix>,
    merged_value: Vec<DenseMatrix>,
    adapters: Option<Vec<LayerAdapters>>,
    head: DenseMatrix,
    task_classes: Vec<usize>,
}

/// Analytic gradients of the masked cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub b_key: Vec<DenseMatrix>,
    pub b_value: Vec<DenseMatrix>,
    /// Rows for the active classes only.
    pub head: DenseMatrix,
    pub loss: f64,
}

/// Layer inputs seen during a forward pass: for each layer, one row per token
/// per sample (class token included).
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedInputs {
    pub per_layer: Vec<DenseMatrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: DenseMatrix,
    pub captured: Option<CapturedInputs>,
}

struct LayerCache {
    x: DenseMatrix,
    q: DenseMatrix,
    k: DenseMatrix,
    v: DenseMatrix,
    p: DenseMatrix,
    u: DenseMatrix,
    t_key: Option<DenseMatrix>,
    t_value: Option<DenseMatrix>,
}

struct EffectiveLayer<'a> {
    frozen: &'a FrozenLayer,
    w_k: DenseMatrix,
    w_v: DenseMatrix,
    adapters: Option<&'a LayerAdapters>,
}

const GELU_C: f64 = 0.044_715;

fn gelu(u: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * u * (1.0 + (k * (u + GELU_C * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let t = (k * (u + GELU_C * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * u * u)
}

fn softmax_rows(s: &DenseMatrix) -> DenseMatrix {
    let mut p = s.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    p
}

/// `log Σ exp(z)` computed stably.
fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl ModelState {
    pub fn new(backbone: Backbone) -> Self {
        let d = backbone.config.embed_dim;
        let layers = backbone.config.num_layers;
        Self {
            merged_key: vec![DenseMatrix::zeros(d, d); layers],
            merged_value: vec![DenseMatrix::zeros(d, d); layers],
            adapters: None,
            head: DenseMatrix::zeros(0, d),
            task_classes: Vec::new(),
            backbone: Arc::new(backbone),
        }
    }

    /// Reassembles a state from stored tensors (checkpoint loading).
    pub fn from_parts(
        backbone: Backbone,
        merged_key: Vec<DenseMatrix>,
        merged_value: Vec<DenseMatrix>,
        adapters: Option<Vec<LayerAdapters>>,
        head: DenseMatrix,
        task_classes: Vec<usize>,
    ) -> Result<Self> {
        let cfg = backbone.config;
        let d = cfg.embed_dim;
        let square = |m: &DenseMatrix| m.shape() == (d, d);
        if merged_key.len() != cfg.num_layers
            || merged_value.len() != cfg.num_layers
            || !merged_key.iter().all(square)
            || !merged_value.iter().all(square)
        {
            return Err(Error::contract("merged deltas do not match the backbone"));
        }
        if head.cols() != d || head.rows() != task_classes.iter().sum::<usize>() {
            return Err(Error::contract("head shape does not match the task bookkeeping"));
        }
        if let Some(ad) = &adapters {
            if ad.len() != cfg.num_layers {
                return Err(Error::contract("adapter count does not match the backbone"));
            }
        }
        Ok(Self {
            backbone: Arc::new(backbone),
            merged_key,
            merged_value,
            adapters,
            head,
            task_classes,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.backbone.config
    }

    pub fn head(&self) -> &DenseMatrix {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut DenseMatrix {
        &mut self.head
    }

    pub fn merged(&self, layer: usize, p: Projection) -> &DenseMatrix {
        match p {
            Projection::Key => &self.merged_key[layer],
            Projection::Value => &self.merged_value[layer],
        }
    }

    pub fn adapters(&self) -> Option<&[LayerAdapters]> {
        self.adapters.as_deref()
    }

    pub fn adapters_mut(&mut self) -> Option<&mut [LayerAdapters]> {
        self.adapters.as_deref_mut()
    }

    /// Number of tasks begun so far.
    pub fn task_index(&self) -> usize {
        self.task_classes.len()
    }

    pub fn task_classes(&self) -> &[usize] {
        &self.task_classes
    }

    pub fn num_classes(&self) -> usize {
        self.head.rows()
    }

    /// Head rows `lo..hi` belonging to the most recently begun task.
    pub fn active_class_range(&self) -> std::ops::Range<usize> {
        let total = self.head.rows();
        let last = self.task_classes.last().copied().unwrap_or(0);
        total - last..total
    }

    /// Installs fresh adapters with `B = 0` and extends the head with
    /// zero rows for the new classes.
    pub fn begin_task(&mut self, bases: &[AdapterBases], new_classes: usize) -> Result<()> {
        if new_classes == 0 {
            return Err(Error::contract("a task must introduce at least one class"));
        }
        if self.adapters.is_some() {
            return Err(Error::State(
                "begin_task called while the previous task's adapters are unmerged".into(),
            ));
        }
        let d = self.config().embed_dim;
        if bases.len() != self.config().num_layers {
            return Err(Error::contract(format!(
                "{} adapter bases supplied for {} layers",
                bases.len(),
                self.config().num_layers
            )));
        }
        let mut adapters = Vec::with_capacity(bases.len());
        for (l, base) in bases.iter().enumerate() {
            for p in Projection::BOTH {
                let a = base.get(p);
                if a.rows() != d || a.cols() == 0 || a.cols() > d {
                    return Err(Error::contract(format!(
                        "adapter basis for layer {l} {} has shape {:?}",
                        p.tag(),
                        a.shape()
                    )));
                }
                check_orthonormal(a, &format!("adapter basis for layer {l} {}", p.tag()))?;
            }
            adapters.push(LayerAdapters {
                key: LoraAdapter {
                    a: base.key.clone(),
                    b: DenseMatrix::zeros(base.key.cols(), d),
                },
                value: LoraAdapter {
                    a: base.value.clone(),
                    b: DenseMatrix::zeros(base.value.cols(), d),
                },
            });
        }
        self.adapters = Some(adapters);
        self.head = self.head.vstack(&DenseMatrix::zeros(new_classes, d))?;
        self.task_classes.push(new_classes);
        Ok(())
    }

    /// Folds the current `A·B` into the dense deltas and clears the adapters.
    pub fn merge_current_task(&mut self) -> Result<()> {
        let adapters = self
            .adapters
            .take()
            .ok_or_else(|| Error::State("no current adapters to merge".into()))?;
        for (l, ad) in adapters.iter().enumerate() {
            self.merged_key[l].add_assign(&ad.key.delta())?;
            self.merged_value[l].add_assign(&ad.value.delta())?;
        }
        Ok(())
    }

    /// The current `B` factors.
    pub fn trainable_b(&self) -> Option<Vec<LayerB>> {
        self.adapters.as_ref().map(|ads| {
            ads.iter()
                .map(|a| LayerB {
                    key: a.key.b.clone(),
                    value: a.value.b.clone(),
                })
                .collect()
        })
    }

    /// Head rows of the active task.
    pub fn active_head_rows(&self) -> DenseMatrix {
        let r = self.active_class_range();
        self.head.row_block(r.start, r.end)
    }

    /// Overwrites the trainable tensors (all `B` and the active head rows).
    pub fn install_trainable(&mut self, b: &[LayerB], head_rows: &DenseMatrix) -> Result<()> {
        let range = self.active_class_range();
        let d = self.config().embed_dim;
        if head_rows.shape() != (range.len(), d) {
            return Err(Error::Dimension {
                op: "install_trainable (head rows)",
                left: (range.len(), d),
                right: head_rows.shape(),
            });
        }
        let adapters = self
            .adapters
            .as_mut()
            .ok_or_else(|| Error::State("no current adapters to update".into()))?;
        if b.len() != adapters.len() {
            return Err(Error::contract("B count does not match layer count"));
        }
        for (ad, new) in adapters.iter_mut().zip(b) {
            if ad.key.b.shape() != new.key.shape() || ad.value.b.shape() != new.value.shape() {
                return Err(Error::Dimension {
                    op: "install_trainable (B)",
                    left: ad.key.b.shape(),
                    right: new.key.shape(),
                });
            }
            ad.key.b = new.key.clone();
            ad.value.b = new.value.clone();
        }
        for (i, row) in range.enumerate() {
            self.head.row_mut(row).copy_from_slice(head_rows.row(i));
        }
        Ok(())
    }

    /// Checksum over every tensor of the state (backbone included).
    pub fn checksum(&self) -> String {
        let mut tensors: Vec<&DenseMatrix> =
            self.backbone.tensors().into_iter().map(|(_, t)| t).collect();
        tensors.extend(self.merged_key.iter());
        tensors.extend(self.merged_value.iter());
        if let Some(ads) = &self.adapters {
            for a in ads {
                tensors.extend([&a.key.a, &a.key.b, &a.value.a, &a.value.b]);
            }
        }
        tensors.push(&self.head);
        checksum_of(tensors)
    }

    fn effective_layers(&self) -> Result<Vec<EffectiveLayer<'_>>> {
        self.backbone
            .layers
            .iter()
            .enumerate()
            .map(|(l, frozen)| {
                Ok(EffectiveLayer {
                    frozen,
                    w_k: frozen.w_k.add(&self.merged_key[l])?,
                    w_v: frozen.w_v.add(&self.merged_value[l])?,
                    adapters: self.adapters.as_ref().map(|a| &a[l]),
                })
            })
            .collect()
    }

    fn embed(&self, x: &[f64]) -> Result<DenseMatrix> {
        let cfg = self.config();
        let c = cfg.patch_dim();
        let patches = DenseMatrix::new(cfg.num_tokens - 1, c, x.to_vec())?;
        let tokens = patches.matmul(&self.backbone.patch_embed)?;
        self.backbone.class_token.vstack(&tokens)
    }

    fn layer_forward(&self, layer: &EffectiveLayer<'_>, x: DenseMatrix) -> Result<(DenseMatrix, LayerCache)> {
        let d = self.config().embed_dim as f64;
        let f = layer.frozen;
        let q = x.matmul(&f.w_q)?;
        let mut k = x.matmul(&layer.w_k)?;
        let mut v = x.matmul(&layer.w_v)?;
        let (mut t_key, mut t_value) = (None, None);
        if let Some(ad) = layer.adapters {
            let tk = x.matmul(&ad.key.a)?;
            k.add_assign(&tk.matmul(&ad.key.b)?)?;
            let tv = x.matmul(&ad.value.a)?;
            v.add_assign(&tv.matmul(&ad.value.b)?)?;
            t_key = Some(tk);
            t_value = Some(tv);
        }
        let scores = q.matmul_t(&k)?.scale(1.0 / d.sqrt());
        let p = softmax_rows(&scores);
        let z = p.matmul(&v)?;
        let x1 = x.add(&z.matmul(&f.w_o)?)?;
        let u = x1.matmul(&f.w_1)?;
        let g = u.map(gelu);
        let x2 = x1.add(&g.matmul(&f.w_2)?)?;
        Ok((
            x2,
            LayerCache {
                x,
                q,
                k,
                v,
                p,
                u,
                t_key,
                t_value,
            },
        ))
    }

    fn check_batch(&self, batch: &DenseMatrix) -> Result<()> {
        if batch.cols() != self.config().input_dim {
            return Err(Error::Dimension {
                op: "forward (input dim)",
                left: (batch.rows(), self.config().input_dim),
                right: batch.shape(),
            });
        }
        Ok(())
    }

    /// Logits over every seen class, one row per sample. With `capture`, the
    /// token inputs of every layer's key/value projections are returned too.
    pub fn forward(&self, batch: &DenseMatrix, capture: bool) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let layers = self.effective_layers()?;
        let n = batch.rows();
        let d = self.config().embed_dim;
        let s = self.config().num_tokens;
        let mut logits = DenseMatrix::zeros(n, self.head.rows());
        let mut captured: Option<Vec<DenseMatrix>> =
            capture.then(|| vec![DenseMatrix::zeros(n * s, d); layers.len()]);
        for i in 0..n {
            let mut x = self.embed(batch.row(i))?;
            for (l, layer) in layers.iter().enumerate() {
                if let Some(cap) = captured.as_mut() {
                    for t in 0..s {
                        cap[l].row_mut(i * s + t).copy_from_slice(x.row(t));
                    }
                }
                x = self.layer_forward(layer, x)?.0;
            }
            let cls = x.row(0);
            for c in 0..self.head.rows() {
                logits[(i, c)] = crate::linalg::dot(self.head.row(c), cls);
            }
        }
        Ok(ForwardOutput {
            logits,
            captured: captured.map(|per_layer| CapturedInputs { per_layer }),
        })
    }

    fn check_labels(&self, labels: &[usize], range: &std::ops::Range<usize>, n: usize) -> Result<()> {
        if labels.len() != n {
            return Err(Error::Data(format!("{} labels for {n} samples", labels.len())));
        }
        if range.is_empty() || range.end > self.head.rows() {
            return Err(Error::Data(format!(
                "active class range {range:?} outside the {} seen classes",
                self.head.rows()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| !range.contains(l)) {
            return Err(Error::Data(format!("label {bad} outside active range {range:?}")));
        }
        Ok(())
    }

    /// Mean cross-entropy restricted to the logits in `range`.
    pub fn loss(&self, batch: &DenseMatrix, labels: &[usize], range: std::ops::Range<usize>) -> Result<f64> {
        self.check_labels(labels, &range, batch.rows())?;
        let logits = self.forward(batch, false)?.logits;
        let n = batch.rows();
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let z = &logits.row(i)[range.clone()];
            total += log_sum_exp(z) - z[label - range.start];
        }
        Ok(total / n as f64)
    }

    /// Loss and exact gradients of the masked cross-entropy with respect to
    /// every `B` and the head rows in `range`.
    pub fn loss_and_grads(
        &self,
        batch: &DenseMatrix,
        labels: &[usize],
        range: std::ops::Range<usize>,
    ) -> Result<GradientSet> {
        self.check_batch(batch)?;
        self.check_labels(labels, &range, batch.rows())?;
        let adapters = self
            .adapters
            .as_ref()
            .ok_or_else(|| Error::State("no trainable adapters installed".into()))?;
        let layers = self.effective_layers()?;
        let n = batch.rows();
        let d = self.config().embed_dim;
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();

        let mut grads = GradientSet {
            b_key: adapters.iter().map(|a| DenseMatrix::zeros(a.key.rank(), d)).collect(),
            b_value: adapters.iter().map(|a| DenseMatrix::zeros(a.value.rank(), d)).collect(),
            head: DenseMatrix::zeros(range.len(), d),
            loss: 0.0,
        };

        for (i, &label) in labels.iter().enumerate() {
            let mut x = self.embed(batch.row(i))?;
            let mut caches = Vec::with_capacity(layers.len());
            for layer in &layers {
                let (out, cache) = self.layer_forward(layer, x)?;
                caches.push(cache);
                x = out;
            }
            let cls = x.row(0).to_vec();

            let z: Vec<f64> = range
                .clone()
                .map(|c| crate::linalg::dot(self.head.row(c), &cls))
                .collect();
            let lse = log_sum_exp(&z);
            grads.loss += (lse - z[label - range.start]) / n as f64;

            let mut d_cls = vec![0.0; d];
            for (j, c) in range.clone().enumerate() {
                let mut dz = (z[j] - lse).exp();
                if c == label {
                    dz -= 1.0;
                }
                dz /= n as f64;
                for (g, h) in grads.head.row_mut(j).iter_mut().zip(&cls) {
                    *g += dz * h;
                }
                for (g, w) in d_cls.iter_mut().zip(self.head.row(c)) {
                    *g += dz * w;
                }
            }

            let mut dx = DenseMatrix::zeros(x.rows(), d);
            dx.row_mut(0).copy_from_slice(&d_cls);

            for (l, (layer, cache)) in layers.iter().zip(&caches).enumerate().rev() {
                let f = layer.frozen;
                // MLP block
                let mut d_u = dx.matmul_t(&f.w_2)?;
                for (g, &u) in d_u.data_mut().iter_mut().zip(cache.u.data()) {
                    *g *= gelu_grad(u);
                }
                let mut d_x1 = dx;
                d_x1.add_assign(&d_u.matmul_t(&f.w_1)?)?;

                // attention block
                let d_z = d_x1.matmul_t(&f.w_o)?;
                let mut d_in = d_x1;
                let d_p = d_z.matmul_t(&cache.v)?;
                let d_v = cache.p.t_matmul(&d_z)?;
                let mut d_s = DenseMatrix::zeros(d_p.rows(), d_p.cols());
                for r in 0..d_p.rows() {
                    let pr = cache.p.row(r);
                    let gr = d_p.row(r);
                    let inner = crate::linalg::dot(pr, gr);
                    for (c, o) in d_s.row_mut(r).iter_mut().enumerate() {
                        *o = pr[c] * (gr[c] - inner) * inv_sqrt_d;
                    }
                }
                let d_q = d_s.matmul(&cache.k)?;
                let d_k = d_s.t_matmul(&cache.q)?;
                d_in.add_assign(&d_q.matmul_t(&f.w_q)?)?;
                d_in.add_assign(&d_k.matmul_t(&layer.w_k)?)?;
                d_in.add_assign(&d_v.matmul_t(&layer.w_v)?)?;

                let ad = layer.adapters.expect("adapters checked above");
                let t_key = cache.t_key.as_ref().expect("adapter branch cached");
                let t_value = cache.t_value.as_ref().expect("adapter branch cached");
                grads.b_key[l].add_assign(&t_key.t_matmul(&d_k)?)?;
                grads.b_value[l].add_assign(&t_value.t_matmul(&d_v)?)?;
                let d_tk = d_k.matmul_t(&ad.key.b)?;
                let d_tv = d_v.matmul_t(&ad.value.b)?;
                d_in.add_assign(&d_tk.matmul_t(&ad.key.a)?)?;
                d_in.add_assign(&d_tv.matmul_t(&ad.value.a)?)?;

                debug_assert_eq!(d_in.shape(), cache.x.shape());
                dx = d_in;
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::qr_orthonormalize;
    use crate::rng::{gaussian_matrix, rng_for, Stream};
    use crate::testutil::{assert_close, uniform_matrix};

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            embed_dim: 8,
            num_layers: 2,
            num_tokens: 5,
            input_dim: 12,
            mlp_hidden: 16,
        }
    }

    fn random_bases(cfg: &BackboneConfig, r: usize, seed: u64) -> Vec<AdapterBases> {
        let mut rng = rng_for(seed, Stream::RandomAdapter, &[]);
        (0..cfg.num_layers)
            .map(|_| AdapterBases {
                key: qr_orthonormalize(&gaussian_matrix(&mut rng, cfg.embed_dim, r, 1.0)).unwrap(),
                value: qr_orthonormalize(&gaussian_matrix(&mut rng, cfg.embed_dim, r, 1.0)).unwrap(),
            })
            .collect()
    }

    /// Straight-line forward pass of the bare backbone, written independently
    /// of `ModelState::forward`.
    fn oracle_cls(bb: &Backbone, x: &[f64]) -> Vec<f64> {
        let cfg = bb.config;
        let d = cfg.embed_dim;
        let c = cfg.patch_dim();
        let mut tokens: Vec<Vec<f64>> = vec![bb.class_token.row(0).to_vec()];
        for j in 0..cfg.num_tokens - 1 {
            let patch = &x[j * c..(j + 1) * c];
            tokens.push((0..d).map(|o| (0..c).map(|i| patch[i] * bb.patch_embed[(i, o)]).sum()).collect());
        }
        let apply = |t: &[f64], w: &DenseMatrix| -> Vec<f64> {
            (0..w.cols()).map(|o| (0..w.rows()).map(|i| t[i] * w[(i, o)]).sum()).collect()
        };
        for layer in &bb.layers {
            let q: Vec<Vec<f64>> = tokens.iter().map(|t| apply(t, &layer.w_q)).collect();
            let k: Vec<Vec<f64>> = tokens.iter().map(|t| apply(t, &layer.w_k)).collect();
            let v: Vec<Vec<f64>> = tokens.iter().map(|t| apply(t, &layer.w_v)).collect();
            let mut next = Vec::new();
            for (a, tok) in tokens.iter().enumerate() {
                let scores: Vec<f64> = k
                    .iter()
                    .map(|kb| q[a].iter().zip(kb).map(|(x, y)| x * y).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                let mix: Vec<f64> = (0..d).map(|o| e.iter().zip(&v).map(|(w, vb)| w / z * vb[o]).sum()).collect();
                let attn = apply(&mix, &layer.w_o);
                let x1: Vec<f64> = tok.iter().zip(&attn).map(|(a, b)| a + b).collect();
                let hidden: Vec<f64> = apply(&x1, &layer.w_1).into_iter().map(gelu).collect();
                let mlp = apply(&hidden, &layer.w_2);
                next.push(x1.iter().zip(&mlp).map(|(a, b)| a + b).collect());
            }
            tokens = next;
        }
        tokens.swap_remove(0)
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let a = Backbone::init(small_config(), 1).unwrap();
        let b = Backbone::init(small_config(), 1).unwrap();
        let c = Backbone::init(small_config(), 2).unwrap();
        assert_eq!(a, b);
        assert!(a.layers[0].w_q.sub(&c.layers[0].w_q).unwrap().frobenius_norm() > 0.0);
        let bad = BackboneConfig {
            input_dim: 13,
            ..small_config()
        };
        assert!(matches!(Backbone::init(bad, 1), Err(Error::Config(_))));
    }

    #[test]
    fn disabled_adapters_match_oracle_forward() {
        let cfg = small_config();
        let bb = Backbone::init(cfg, 4).unwrap();
        let mut model = ModelState::new(bb.clone());
        model.begin_task(&random_bases(&cfg, 2, 1), 3).unwrap();
        *model.head_mut() = uniform_matrix(3, cfg.embed_dim, 8);
        let batch = uniform_matrix(3, cfg.input_dim, 5);
        let logits = model.forward(&batch, false).unwrap().logits;
        for i in 0..3 {
            let cls = oracle_cls(&bb, batch.row(i));
            for c in 0..3 {
                let expect: f64 = model.head().row(c).iter().zip(&cls).map(|(a, b)| a * b).sum();
                assert_close!(logits[(i, c)], expect, 1e-12);
            }
        }
    }

    #[test]
    fn duplicate_samples_give_identical_rows() {
        let cfg = small_config();
        let mut model = ModelState::new(Backbone::init(cfg, 4).unwrap());
        model.begin_task(&random_bases(&cfg, 2, 1), 2).unwrap();
        *model.head_mut() = uniform_matrix(2, cfg.embed_dim, 3);
        let x = uniform_matrix(1, cfg.input_dim, 2);
        let other = uniform_matrix(1, cfg.input_dim, 9);
        let batch = x.vstack(&other).unwrap().vstack(&x).unwrap();
        let logits = model.forward(&batch, false).unwrap().logits;
        assert_eq!(logits.row(0), logits.row(2));
    }

    #[test]
    fn capture_counts_token_columns() {
        let cfg = BackboneConfig {
            input_dim: 16,
            ..small_config()
        };
        let mut model = ModelState::new(Backbone::init(cfg, 4).unwrap());
        model.begin_task(&random_bases(&cfg, 2, 1), 2).unwrap();
        let batch = uniform_matrix(4, cfg.input_dim, 2);
        let cap = model.forward(&batch, true).unwrap().captured.unwrap();
        assert_eq!(cap.per_layer.len(), 2);
        let total: usize = cap.per_layer.iter().map(|m| m.rows()).sum();
        // 4 samples × 5 tokens (class token included) × 2 layers
        assert_eq!(total, 40);
        assert_eq!(cap.per_layer[0].row(0), model.backbone().class_token.row(0));
    }

    #[test]
    fn begin_task_bookkeeping_and_neutrality() {
        let cfg = small_config();
        let mut model = ModelState::new(Backbone::init(cfg, 4).unwrap());
        model.begin_task(&random_bases(&cfg, 2, 1), 10).unwrap();
        assert_eq!(model.head().rows(), 10);
        assert_eq!(model.task_index(), 1);
        *model.head_mut() = uniform_matrix(10, cfg.embed_dim, 3);
        for ad in model.adapters_mut().unwrap() {
            ad.key.b = uniform_matrix(2, cfg.embed_dim, 4);
            ad.value.b = uniform_matrix(2, cfg.embed_dim, 5);
        }
        let batch = uniform_matrix(5, cfg.input_dim, 6);
        let before = model.forward(&batch, false).unwrap().logits;
        model.merge_current_task().unwrap();
        model.begin_task(&random_bases(&cfg, 2, 2), 10).unwrap();
        assert_eq!(model.head().rows(), 20);
        assert_eq!(model.task_index(), 2);
        assert_eq!(model.active_class_range(), 10..20);
        let after = model.forward(&batch, false).unwrap().logits;
        for i in 0..5 {
            for c in 0..10 {
                assert_close!(before[(i, c)], after[(i, c)], 1e-12);
            }
        }
    }

    #[test]
    fn begin_task_rejects_non_orthonormal() {
        let cfg = small_config();
        let mut model = ModelState::new(Backbone::init(cfg, 4).unwrap());
        let mut bases = random_bases(&cfg, 2, 1);
        bases[1].value = bases[1].value.scale(2.0);
        assert!(matches!(model.begin_task(&bases, 2), Err(Error::Contract(_))));
        assert!(matches!(model.begin_task(&random_bases(&cfg, 2, 1), 0), Err(Error::Contract(_))));
    }

    #[test]
    fn merge_errors_and_zero_b_is_bit_identical() {
        let cfg = small_config();
        let mut model = ModelState::new(Backbone::init(cfg, 4).unwrap());
        assert!(matches!(model.merge_current_task(), Err(Error::State(_))));
        model.begin_task(&random_bases(&cfg, 2, 1), 2).unwrap();
        let before = model.merged(0, Projection::Key).clone();
        model.merge_current_task().unwrap();
        assert_eq!(model.merged(0, Projection::Key), &before);
        assert!(matches!(model.merge_current_task(), Err(Error::State(_))));
    }

    #[test]
    fn merged_deltas_are_additive() {
        let cfg = small_config();
        let mut model = ModelState::new(Backbone::init(cfg, 4).unwrap());
        let mut expected = DenseMatrix::zeros(cfg.embed_dim, cfg.embed_dim);
        for t in 0..2 {
            model.begin_task(&random_bases(&cfg, 2, t), 2).unwrap();
            let b = uniform_matrix(2, cfg.embed_dim, 20 + t);
            model.adapters_mut().unwrap()[1].value.b = b.clone();
            let a = model.adapters().unwrap()[1].value.a.clone();
            expected.add_assign(&a.matmul(&b).unwrap()).unwrap();
            model.merge_current_task().unwrap();
        }
        assert!(model.merged(1, Projection::Value).max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let cfg = small_config();
        let mut model = ModelState::new(Backbone::init(cfg, 4).unwrap());
        model.begin_task(&random_bases(&cfg, 2, 1), 4).unwrap();
        let batch = uniform_matrix(3, cfg.input_dim, 2);
        let g = model.loss_and_grads(&batch, &[0, 1, 3], 0..4).unwrap();
        assert_close!(g.loss, 4f64.ln(), 1e-12);
        // zero head: no signal reaches B
        assert!(g.b_key.iter().chain(&g.b_value).all(|m| m.frobenius_norm() == 0.0));
    }

    #[test]
    fn labels_outside_range_are_rejected() {
        let cfg = small_config();
        let mut model = ModelState::new(Backbone::init(cfg, 4).unwrap());
        model.begin_task(&random_bases(&cfg, 2, 1), 2).unwrap();
        let batch = uniform_matrix(2, cfg.input_dim, 2);
        assert!(matches!(model.loss_and_grads(&batch, &[0, 2], 0..2), Err(Error::Data(_))));
        let wrong = uniform_matrix(2, cfg.input_dim + 4, 2);
        assert!(matches!(model.forward(&wrong, false), Err(Error::Dimension { .. })));
    }
}
