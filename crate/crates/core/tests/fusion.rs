mod common;

use bonenet::data::Region;
use bonenet::fusion::FusedModel;
use bonenet::train::{train, TrainConfig};
use bonenet::{Arch, Model, ModelConfig};
use common::*;

/// Members trained briefly on a separate 120-sample set, as early fusion
/// consumes trained checkpoints.
fn trained_member(arch: Arch, seed: u64) -> Model {
    let cfg = ModelConfig {
        input_size: 32,
        block_channels: [8, 16, 32, 32, 32],
        convs_per_block: 1,
        n_units: 32,
        head_dims: [64, 32],
        dropout_rate: 0.1,
        ..ModelConfig::default()
    }
    .with_arch(arch);
    let s = samples(120, 100 + seed);
    let set = prepared(&s, Region::Full);
    let tcfg = TrainConfig {
        epochs: 15,
        lr0: 1e-3,
        seed,
        ..TrainConfig::default()
    };
    train(Model::build(&cfg, seed).unwrap(), &set, &set, &tcfg).unwrap().last
}

#[test]
fn fused_head_memorizes_sixteen_samples() {
    let members = vec![trained_member(Arch::Plain, 1), trained_member(Arch::Hier, 2)];
    let frozen = members[0].named_tensors();
    let s = samples(16, 21);
    let set = prepared(&s, Region::Full);
    let fused = FusedModel::build(members, [64, 32], 0.0, 3).unwrap();
    let cfg = TrainConfig {
        epochs: 300,
        // The head sees uncentred features from frozen extractors; it needs
        // more steps per epoch than the full network does.
        batch_size: 4,
        lr0: 1e-3,
        augment: false,
        seed: 3,
        ..TrainConfig::default()
    };
    let out = train(fused, &set, &set, &cfg).unwrap();
    let last = out.history.last().unwrap().val_mae;
    assert!(last < 0.5, "train MAE after 300 epochs: {last}");
    assert_eq!(out.last.members()[0].named_tensors(), frozen, "frozen member moved");
}
