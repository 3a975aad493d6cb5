//! Locate-then-edit toolkit for paraphrase consistency in decoder-only
//! transformers.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`datasets`] builds paraphrase pairs `[p, q]` and labels each one as
//!    consistent (`c = 1`) when the model gives the same normalized answer to
//!    both prompts.
//! 2. [`probing`] trains one logistic probe per attention head and per MLP on
//!    the concatenated last-token activations of `p` and `q`, and ranks the
//!    components by held-out accuracy.
//! 3. [`editing`] computes a mass-mean bias for the top-K components (mean
//!    activation over consistent pairs minus the mean over all pairs).
//! 4. [`engine`] adds `alpha * bias` to those component outputs at inference
//!    time, and [`evaluation`] measures accuracy, its spread across instruction
//!    templates, and answer similarity.
//!
//! [`model_io`] provides the checkpoint and tokenizer formats, plus a
//! generator for "planted" models whose inconsistency is wired into known
//! heads, so the whole pipeline can be checked without pretrained weights.

pub mod datasets;
pub mod editing;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod model_io;
pub mod numerics;
pub mod par;
pub mod probing;

pub use engine::{ComponentId, ComponentKind, InjectionSet, Model, ModelConfig};
pub use error::{Error, Result};
pub use model_io::Tokenizer;
