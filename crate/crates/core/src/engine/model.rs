use std::collections::BTreeMap;

use super::config::{MlpKind, ModelConfig, NormKind, PosKind};
use crate::error::{Error, Result};
use crate::model_io::{Checkpoint, Tensor};
use crate::numerics::{self, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gain: Vec<f32>,
    /// Present for layernorm only.
    pub shift: Option<Vec<f32>>,
}

impl Norm {
    pub(crate) fn apply(&self, x: &[f32], eps: f32) -> Vec<f32> {
        let out = match &self.shift {
            Some(shift) => numerics::layer_norm(x, &self.gain, shift, eps),
            None => numerics::rms_norm(x, &self.gain, eps),
        };
        // shapes are validated when the model is built
        out.expect("norm shapes validated at load")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: Norm,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub norm2: Norm,
    pub w1: Matrix,
    pub w2: Matrix,
    pub w3: Option<Matrix>,
}

/// Immutable model weights. Shareable across threads; every forward pass owns
/// its own scratch state.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub(crate) config: ModelConfig,
    pub(crate) tok_emb: Matrix,
    pub(crate) pos_emb: Option<Matrix>,
    pub(crate) blocks: Vec<Block>,
    pub(crate) final_norm: Norm,
    pub(crate) unembed: Matrix,
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn tok_emb(&self) -> &Matrix {
        &self.tok_emb
    }

    pub fn pos_emb(&self) -> Option<&Matrix> {
        self.pos_emb.as_ref()
    }

    pub fn final_norm(&self) -> &Norm {
        &self.final_norm
    }

    pub fn unembed(&self) -> &Matrix {
        &self.unembed
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
        ckpt.validate()?;
        let cfg = ckpt.config.clone();
        let mut tensors = ckpt.tensors.clone();
        let mut take = |name: &str| -> Result<Tensor> {
            tensors
                .remove(name)
                .ok_or_else(|| Error::Schema(format!("missing tensor {name:?}")))
        };
        let mat = |t: Tensor| -> Result<Matrix> {
            match t.shape.as_slice() {
                [r, c] => Matrix::from_vec(*r, *c, t.data),
                other => Err(Error::Schema(format!(
                    "expected a matrix, got shape {other:?}"
                ))),
            }
        };
        let layer_norm = cfg.norm_kind == NormKind::LayerNorm;
        let norm = |prefix: &str, take: &mut dyn FnMut(&str) -> Result<Tensor>| -> Result<Norm> {
            let gain = take(&format!("{prefix}.gain"))?.data;
            let shift = if layer_norm {
                Some(take(&format!("{prefix}.shift"))?.data)
            } else {
                None
            };
            Ok(Norm { gain, shift })
        };

        let tok_emb = mat(take("tok_emb")?)?;
        let pos_emb = match cfg.pos_kind {
            PosKind::Learned => Some(mat(take("pos_emb")?)?),
            PosKind::Rotary => None,
        };
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let p = format!("blk.{i}");
            blocks.push(Block {
                norm1: norm(&format!("{p}.norm1"), &mut take)?,
                wq: mat(take(&format!("{p}.attn.wq"))?)?,
                wk: mat(take(&format!("{p}.attn.wk"))?)?,
                wv: mat(take(&format!("{p}.attn.wv"))?)?,
                wo: mat(take(&format!("{p}.attn.wo"))?)?,
                norm2: norm(&format!("{p}.norm2"), &mut take)?,
                w1: mat(take(&format!("{p}.mlp.w1"))?)?,
                w2: mat(take(&format!("{p}.mlp.w2"))?)?,
                w3: match cfg.mlp_kind {
                    MlpKind::SiluGated => Some(mat(take(&format!("{p}.mlp.w3"))?)?),
                    MlpKind::Gelu => None,
                },
            });
        }
        let final_norm = norm("final_norm", &mut take)?;
        let unembed = mat(take("unembed")?)?;
        Ok(Model {
            config: cfg,
            tok_emb,
            pos_emb,
            blocks,
            final_norm,
            unembed,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        let mut put_mat = |name: String, m: &Matrix| {
            tensors.insert(
                name,
                Tensor {
                    shape: vec![m.rows(), m.cols()],
                    data: m.data().to_vec(),
                },
            );
        };
        put_mat("tok_emb".into(), &self.tok_emb);
        if let Some(p) = &self.pos_emb {
            put_mat("pos_emb".into(), p);
        }
        put_mat("unembed".into(), &self.unembed);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blk.{i}");
            put_mat(format!("{p}.attn.wq"), &b.wq);
            put_mat(format!("{p}.attn.wk"), &b.wk);
            put_mat(format!("{p}.attn.wv"), &b.wv);
            put_mat(format!("{p}.attn.wo"), &b.wo);
            put_mat(format!("{p}.mlp.w1"), &b.w1);
            put_mat(format!("{p}.mlp.w2"), &b.w2);
            if let Some(w3) = &b.w3 {
                put_mat(format!("{p}.mlp.w3"), w3);
            }
        }
        let mut put_norm = |prefix: String, n: &Norm| {
            tensors.insert(
                format!("{prefix}.gain"),
                Tensor {
                    shape: vec![n.gain.len()],
                    data: n.gain.clone(),
                },
            );
            if let Some(s) = &n.shift {
                tensors.insert(
                    format!("{prefix}.shift"),
                    Tensor {
                        shape: vec![s.len()],
                        data: s.clone(),
                    },
                );
            }
        };
        for (i, b) in self.blocks.iter().enumerate() {
            put_norm(format!("blk.{i}.norm1"), &b.norm1);
            put_norm(format!("blk.{i}.norm2"), &b.norm2);
        }
        put_norm("final_norm".into(), &self.final_norm);
        Checkpoint {
            config: self.config.clone(),
            tensors,
        }
    }
}
