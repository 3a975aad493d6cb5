use serde::{Deserialize, Serialize};

use super::ComponentId;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpKind {
    Gelu,
    SiluGated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosKind {
    Learned,
    Rotary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm_kind: NormKind,
    pub norm_eps: f32,
    pub mlp_kind: MlpKind,
    pub pos_kind: PosKind,
    pub rotary_base: f32,
}

impl ModelConfig {
    /// GPT-style defaults (layernorm, GELU, learned positions).
    pub fn new(n_layers: usize, n_heads: usize, d_model: usize, vocab_size: usize) -> Self {
        ModelConfig {
            n_layers,
            n_heads,
            d_model,
            d_head: d_model / n_heads.max(1),
            d_ff: 4 * d_model,
            vocab_size,
            max_seq_len: 64,
            norm_kind: NormKind::LayerNorm,
            norm_eps: 1e-5,
            mlp_kind: MlpKind::Gelu,
            pos_kind: PosKind::Learned,
            rotary_base: 10000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Schema(format!("{name} must be at least 1")));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Schema(format!(
                "n_heads ({}) x d_head ({}) != d_model ({})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Schema("max_seq_len must be at least 2".into()));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::Schema("norm_eps must be positive".into()));
        }
        if self.pos_kind == PosKind::Rotary {
            if !self.d_head.is_multiple_of(2) {
                return Err(Error::Schema("rotary positions need an even d_head".into()));
            }
            if !(self.rotary_base > 0.0 && self.rotary_base.is_finite()) {
                return Err(Error::Schema("rotary_base must be positive".into()));
            }
        }
        Ok(())
    }

    /// Number of addressable components, `n_layers × (n_heads + 1)`.
    pub fn n_components(&self) -> usize {
        self.n_layers * (self.n_heads + 1)
    }

    /// All components, layer by layer, heads first then the MLP.
    pub fn components(&self) -> Vec<ComponentId> {
        (0..self.n_layers)
            .flat_map(|l| {
                (0..self.n_heads)
                    .map(move |h| ComponentId::head(l, h))
                    .chain(std::iter::once(ComponentId::mlp(l)))
            })
            .collect()
    }
}
