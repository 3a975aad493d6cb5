//! `STK1` container: magic, `u64` little-endian header length, a UTF-8 JSON
//! header, then raw little-endian f32 tensor bytes. Header offsets are relative
//! to the end of the header, so tensors may appear in any order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{MlpKind, Model, ModelConfig, NormKind, PosKind};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"STK1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: BTreeMap<String, Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

impl Checkpoint {
    /// Expected tensor names and shapes for `config`.
    pub fn schema(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.d_model;
        let mut out = vec![("tok_emb".to_string(), vec![config.vocab_size, d])];
        if config.pos_kind == PosKind::Learned {
            out.push(("pos_emb".into(), vec![config.max_seq_len, d]));
        }
        let ln = config.norm_kind == NormKind::LayerNorm;
        let norm = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
            out.push((format!("{prefix}.gain"), vec![d]));
            if ln {
                out.push((format!("{prefix}.shift"), vec![d]));
            }
        };
        for i in 0..config.n_layers {
            let p = format!("blk.{i}");
            norm(&mut out, &format!("{p}.norm1"));
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("{p}.attn.{w}"), vec![d, d]));
            }
            norm(&mut out, &format!("{p}.norm2"));
            out.push((format!("{p}.mlp.w1"), vec![d, config.d_ff]));
            out.push((format!("{p}.mlp.w2"), vec![config.d_ff, d]));
            if config.mlp_kind == MlpKind::SiluGated {
                out.push((format!("{p}.mlp.w3"), vec![d, config.d_ff]));
            }
        }
        norm(&mut out, "final_norm");
        out.push(("unembed".into(), vec![d, config.vocab_size]));
        out
    }

    /// Checks config invariants, the tensor name/shape schema, and finiteness.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let schema = Self::schema(&self.config);
        for (name, shape) in &schema {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::Schema(format!("missing tensor {name:?}")))?;
            if &t.shape != shape {
                return Err(Error::Schema(format!(
                    "tensor {name:?} has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            if t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Schema(format!(
                    "tensor {name:?} holds {} values for shape {shape:?}",
                    t.data.len()
                )));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "tensor {name:?} has non-finite values"
                )));
            }
        }
        if self.tensors.len() != schema.len() {
            let known: std::collections::HashSet<&str> =
                schema.iter().map(|(n, _)| n.as_str()).collect();
            let extra = self
                .tensors
                .keys()
                .find(|k| !known.contains(k.as_str()))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Schema(format!("unexpected tensor {extra:?}")));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = BTreeMap::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let nbytes = 4 * t.data.len() as u64;
            entries.insert(
                name.clone(),
                Entry {
                    dtype: "f32".into(),
                    shape: t.shape.clone(),
                    offset,
                    nbytes,
                },
            );
            offset += nbytes;
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses and fully validates a checkpoint image.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing STK1 magic".into()));
        }
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
        let header_end = 12u64
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| Error::Format("header length runs past end of file".into()))?
            as usize;
        let header: Header = serde_json::from_slice(&bytes[12..header_end])
            .map_err(|e| Error::Format(format!("bad header JSON: {e}")))?;
        let data = &bytes[header_end..];
        let mut tensors = BTreeMap::new();
        for (name, e) in header.tensors {
            if e.dtype != "f32" {
                return Err(Error::Format(format!(
                    "tensor {name:?} has dtype {:?}, only f32 is supported",
                    e.dtype
                )));
            }
            let count: usize = e.shape.iter().product();
            if e.nbytes != 4 * count as u64 {
                return Err(Error::Format(format!(
                    "tensor {name:?} declares {} bytes for shape {:?}",
                    e.nbytes, e.shape
                )));
            }
            let end = e
                .offset
                .checked_add(e.nbytes)
                .filter(|&end| end <= data.len() as u64)
                .ok_or_else(|| Error::Format(format!("tensor {name:?} runs past end of file")))?;
            let raw = &data[e.offset as usize..end as usize];
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.insert(
                name,
                Tensor {
                    shape: e.shape,
                    data: values,
                },
            );
        }
        let ckpt = Checkpoint {
            config: header.config,
            tensors,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Reads and validates a checkpoint, returning a model ready for inference.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, Model)> {
    let ckpt = Checkpoint::load(path)?;
    let model = Model::from_checkpoint(&ckpt)?;
    Ok((ckpt.config, model))
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    model.to_checkpoint().save(path)
}
