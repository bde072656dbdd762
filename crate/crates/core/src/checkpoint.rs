//! Binary checkpoints of a model and client memories.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DOLF"  u8 version (= 1)  u32 record count
//! record:  u32 name length, UTF-8 name, u64 rows, u64 cols, rows·cols f64
//! ```
//!
//! Scalars and small integer lists (backbone shape, class counts, memory
//! side and dimension) are stored as `1 × n` records, so every value
//! round-trips bit-exactly.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::model::{Backbone, BackboneConfig, FrozenLayer, LayerAdapters, LoraAdapter, ModelState};
use crate::subspace_memory::{Projection, StoredSide, SubspaceMemory};

pub const MAGIC: &[u8; 4] = b"DOLF";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    /// Per client, memories in `federated::slot` order.
    pub memories: Vec<Vec<SubspaceMemory>>,
}

fn ints(values: &[usize]) -> DenseMatrix {
    DenseMatrix::new(1, values.len(), values.iter().map(|&v| v as f64).collect()).expect("finite")
}

fn side_code(side: StoredSide) -> usize {
    match side {
        StoredSide::GradientSpace => 0,
        StoredSide::Complement => 1,
    }
}

fn records(model: &ModelState, memories: &[Vec<SubspaceMemory>]) -> Vec<(String, DenseMatrix)> {
    let cfg = model.config();
    let mut out: Vec<(String, DenseMatrix)> = vec![(
        "meta.backbone".into(),
        ints(&[cfg.embed_dim, cfg.num_layers, cfg.num_tokens, cfg.input_dim, cfg.mlp_hidden]),
    )];
    out.push(("meta.task_classes".into(), ints(model.task_classes())));
    out.push(("meta.clients".into(), ints(&[memories.len()])));
    for (name, t) in model.backbone().tensors() {
        out.push((name, t.clone()));
    }
    for l in 0..cfg.num_layers {
        for p in Projection::BOTH {
            out.push((format!("merged.layer{l}.{}", p.tag()), model.merged(l, p).clone()));
        }
    }
    if let Some(ads) = model.adapters() {
        for (l, ad) in ads.iter().enumerate() {
            for p in Projection::BOTH {
                let a = ad.get(p);
                out.push((format!("adapter.layer{l}.{}.a", p.tag()), a.a.clone()));
                out.push((format!("adapter.layer{l}.{}.b", p.tag()), a.b.clone()));
            }
        }
    }
    out.push(("head".into(), model.head().clone()));
    for (c, mems) in memories.iter().enumerate() {
        out.push((format!("client{c}.memory_count"), ints(&[mems.len()])));
        for (s, m) in mems.iter().enumerate() {
            out.push((
                format!("client{c}.memory{s}.meta"),
                ints(&[m.ambient_dim(), side_code(m.stored_side()), m.memory_dim()]),
            ));
            out.push((format!("client{c}.memory{s}.basis"), m.stored_basis().clone()));
        }
    }
    out
}

pub fn to_bytes(model: &ModelState, memories: &[Vec<SubspaceMemory>]) -> Vec<u8> {
    let recs = records(model, memories);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(recs.len() as u32).to_le_bytes());
    for (name, t) in &recs {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(path: &Path, model: &ModelState, memories: &[Vec<SubspaceMemory>]) -> Result<()> {
    std::fs::write(path, to_bytes(model, memories))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            reason: format!("truncated while reading {what}"),
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic, expected DOLF".into(),
        });
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32("record count")?;
    let mut tensors: BTreeMap<String, (u64, DenseMatrix)> = BTreeMap::new();
    for _ in 0..count {
        let start = r.pos as u64;
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "record name")?)
            .map_err(|_| Error::Format {
                offset: start + 4,
                reason: "record name is not UTF-8".into(),
            })?
            .to_string();
        let rows = r.u64("rows")? as usize;
        let cols = r.u64("cols")? as usize;
        let len = rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| Error::Format {
            offset: start,
            reason: format!("record `{name}` shape {rows}x{cols} overflows"),
        })?;
        let raw = r.take(len, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = DenseMatrix::new(rows, cols, data).map_err(|e| Error::Format {
            offset: start,
            reason: format!("record `{name}`: {e}"),
        })?;
        if tensors.insert(name.clone(), (start, t)).is_some() {
            return Err(Error::Format {
                offset: start,
                reason: format!("duplicate record `{name}`"),
            });
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            reason: "trailing bytes after the last record".into(),
        });
    }
    assemble(tensors, bytes.len() as u64)
}

fn assemble(mut tensors: BTreeMap<String, (u64, DenseMatrix)>, end: u64) -> Result<Checkpoint> {
    let has_adapters = tensors.contains_key("adapter.layer0.key.a");
    let mut take = |name: &str| {
        tensors.remove(name).map(|(_, t)| t).ok_or_else(|| Error::Format {
            offset: end,
            reason: format!("missing record `{name}`"),
        })
    };
    let as_ints = |t: &DenseMatrix| -> Vec<usize> { t.data().iter().map(|&v| v as usize).collect() };

    let shape = as_ints(&take("meta.backbone")?);
    if shape.len() != 5 {
        return Err(Error::Format {
            offset: end,
            reason: "meta.backbone must hold 5 values".into(),
        });
    }
    let config = BackboneConfig {
        embed_dim: shape[0],
        num_layers: shape[1],
        num_tokens: shape[2],
        input_dim: shape[3],
        mlp_hidden: shape[4],
    };
    config.validate()?;
    let task_classes = as_ints(&take("meta.task_classes")?);
    let clients = as_ints(&take("meta.clients")?).first().copied().unwrap_or(0);

    let patch_embed = take("backbone.patch_embed")?;
    let class_token = take("backbone.class_token")?;
    let mut layers = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let mut w = |n: &str| take(&format!("backbone.layer{l}.{n}"));
        layers.push(FrozenLayer {
            w_q: w("w_q")?,
            w_k: w("w_k")?,
            w_v: w("w_v")?,
            w_o: w("w_o")?,
            w_1: w("w_1")?,
            w_2: w("w_2")?,
        });
    }
    let backbone = Backbone {
        config,
        layers,
        patch_embed,
        class_token,
    };

    let mut merged_key = Vec::new();
    let mut merged_value = Vec::new();
    for l in 0..config.num_layers {
        merged_key.push(take(&format!("merged.layer{l}.key"))?);
        merged_value.push(take(&format!("merged.layer{l}.value"))?);
    }
    let adapters = if has_adapters {
        let mut ads = Vec::new();
        for l in 0..config.num_layers {
            let mut ad = |p: &str| -> Result<LoraAdapter> {
                Ok(LoraAdapter {
                    a: take(&format!("adapter.layer{l}.{p}.a"))?,
                    b: take(&format!("adapter.layer{l}.{p}.b"))?,
                })
            };
            ads.push(LayerAdapters {
                key: ad("key")?,
                value: ad("value")?,
            });
        }
        Some(ads)
    } else {
        None
    };
    let head = take("head")?;
    let model = ModelState::from_parts(backbone, merged_key, merged_value, adapters, head, task_classes)?;

    let mut memories = Vec::with_capacity(clients);
    for c in 0..clients {
        let n = as_ints(&take(&format!("client{c}.memory_count"))?).first().copied().unwrap_or(0);
        let mut mems = Vec::with_capacity(n);
        for s in 0..n {
            let meta = as_ints(&take(&format!("client{c}.memory{s}.meta"))?);
            let basis = take(&format!("client{c}.memory{s}.basis"))?;
            if meta.len() != 3 || meta[1] > 1 {
                return Err(Error::Format {
                    offset: end,
                    reason: format!("client{c}.memory{s}.meta is malformed"),
                });
            }
            let side = if meta[1] == 0 {
                StoredSide::GradientSpace
            } else {
                StoredSide::Complement
            };
            mems.push(SubspaceMemory::from_parts(meta[0], side, basis, meta[2])?);
        }
        memories.push(mems);
    }
    if let Some((name, (offset, _))) = tensors.into_iter().next() {
        return Err(Error::Format {
            offset,
            reason: format!("unexpected record `{name}`"),
        });
    }
    Ok(Checkpoint { model, memories })
}
