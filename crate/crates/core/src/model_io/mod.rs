//! Checkpoint and tokenizer file formats, plus synthetic model builders.

mod checkpoint;
mod planted;
mod random;
mod tokenizer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Tensor, MAGIC};
pub use planted::{
    is_filler, make_planted_model, make_planted_model_with, PlantOptions, PlantedHead, PlantedTask,
    MARKED_INSTRUCTIONS,
};
pub use random::random_model;
pub use tokenizer::{
    decode, encode, Tokenizer, TokenizerKind, BYTE_BOS, BYTE_EOS, BYTE_PAD, BYTE_VOCAB,
};
