//! Decoder-only transformer forward pass with component capture and bias
//! injection.
//!
//! Each block is pre-norm: `a = x + Σ_j h_j`, then `x' = a + m`, where `h_j` is
//! head `j`'s attention output already multiplied by its `d_head × d_model`
//! slice of the output projection. Heads and MLPs therefore both write
//! `d_model` vectors into the residual stream, and those are the vectors that
//! get captured and that biases get added to.

mod config;
mod forward;
mod model;

pub use config::{MlpKind, ModelConfig, NormKind, PosKind};
pub use forward::{
    argmax, capture_last_token, forward, forward_traced, generate_greedy, generate_with_states,
    ForwardOutput, Generation, LayerTrace, Session, StepOutput,
};
pub use model::{Block, Model, Norm};

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ComponentKind {
    Head(usize),
    Mlp,
}

/// One attention head or one MLP.
///
/// `layer` is 0-based in memory; JSON and `Display` report it 1-based.
/// The derived `Ord` is (layer, heads before the MLP, head index), which is
/// the tie-break order used when ranking components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "ComponentJson", try_from = "ComponentJson")]
pub struct ComponentId {
    pub layer: usize,
    pub kind: ComponentKind,
}

impl ComponentId {
    pub const fn head(layer: usize, head: usize) -> Self {
        ComponentId {
            layer,
            kind: ComponentKind::Head(head),
        }
    }

    pub const fn mlp(layer: usize) -> Self {
        ComponentId {
            layer,
            kind: ComponentKind::Mlp,
        }
    }

    pub fn head_index(&self) -> Option<usize> {
        match self.kind {
            ComponentKind::Head(h) => Some(h),
            ComponentKind::Mlp => None,
        }
    }

    pub fn is_mlp(&self) -> bool {
        self.kind == ComponentKind::Mlp
    }

    /// Position in `config.components()` order.
    pub fn flat_index(&self, config: &ModelConfig) -> usize {
        let within = self.head_index().unwrap_or(config.n_heads);
        self.layer * (config.n_heads + 1) + within
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.n_layers {
            return Err(Error::Range(format!(
                "component {self} is beyond the model's {} layers",
                config.n_layers
            )));
        }
        if let ComponentKind::Head(h) = self.kind {
            if h >= config.n_heads {
                return Err(Error::Range(format!(
                    "component {self} is beyond the model's {} heads",
                    config.n_heads
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ComponentKind::Head(h) => write!(f, "L{}.H{}", self.layer + 1, h),
            ComponentKind::Mlp => write!(f, "L{}.MLP", self.layer + 1),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ComponentJson {
    layer: usize,
    kind: String,
    head: Option<usize>,
}

impl From<ComponentId> for ComponentJson {
    fn from(c: ComponentId) -> Self {
        ComponentJson {
            layer: c.layer + 1,
            kind: if c.is_mlp() { "mlp" } else { "head" }.to_string(),
            head: c.head_index(),
        }
    }
}

impl TryFrom<ComponentJson> for ComponentId {
    type Error = String;

    fn try_from(j: ComponentJson) -> Result<Self, String> {
        let layer = j
            .layer
            .checked_sub(1)
            .ok_or_else(|| "component layers are numbered from 1".to_string())?;
        match (j.kind.as_str(), j.head) {
            ("head", Some(h)) => Ok(ComponentId::head(layer, h)),
            ("mlp", None) => Ok(ComponentId::mlp(layer)),
            ("head", None) => Err("head component without a head index".into()),
            ("mlp", Some(_)) => Err("mlp component must have head = null".into()),
            (other, _) => Err(format!("unknown component kind {other:?}")),
        }
    }
}

/// A component's output at one token position.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub component: ComponentId,
    pub vector: Vec<f32>,
    pub token_position: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Injection {
    pub component: ComponentId,
    pub bias: Vec<f32>,
    pub alpha: f32,
}

/// Biases added to component outputs, `ĥ = h + alpha * bias`, at every
/// position of a forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InjectionSet {
    entries: Vec<Injection>,
}

impl InjectionSet {
    pub fn new(entries: Vec<Injection>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.component) {
                return Err(Error::Data(format!(
                    "component {} is injected twice",
                    e.component
                )));
            }
            if !e.alpha.is_finite() || e.bias.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "non-finite injection for {}",
                    e.component
                )));
            }
        }
        Ok(InjectionSet { entries })
    }

    pub fn empty() -> Self {
        InjectionSet::default()
    }

    pub fn entries(&self) -> &[Injection] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
