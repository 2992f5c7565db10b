#![allow(dead_code)]

use bonenet::data::{generate_samples, GenParams, Region, Sample};
use bonenet::train::{PreparedSet, TrainConfig};
use bonenet::ModelConfig;

/// Smallest model the five-block backbone admits.
pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        input_size: 32,
        block_channels: [2, 3, 4, 4, 4],
        convs_per_block: 1,
        n_units: 4,
        head_dims: [8, 4],
        dropout_rate: 0.1,
        ..ModelConfig::default()
    }
}

pub fn samples(n: usize, seed: u64) -> Vec<Sample> {
    generate_samples(&GenParams { n, seed, ..GenParams::default() }).unwrap()
}

pub fn prepared(samples: &[Sample], region: Region) -> PreparedSet {
    PreparedSet::new(samples, 32, region)
}

pub fn quick_train(epochs: usize, batch_size: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        seed,
        ..TrainConfig::default()
    }
}
