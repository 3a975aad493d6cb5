use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::checkpoint::{Checkpoint, Tensor};
use crate::engine::{Model, ModelConfig};
use crate::error::Result;

/// Standard deviation of every randomly initialized weight.
pub const INIT_STD: f32 = 0.02;

/// A runnable model with weights drawn from N(0, 0.02²) at `seed`; norm gains
/// are one and shifts zero.
pub fn random_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
    let tensors = Checkpoint::schema(config)
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if name.ends_with(".shift") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            };
            (name, Tensor { shape, data })
        })
        .collect();
    Model::from_checkpoint(&Checkpoint {
        config: config.clone(),
        tensors,
    })
}
