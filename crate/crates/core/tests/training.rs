mod common;

use bonenet::data::Region;
use bonenet::train::{
    evaluate, history_csv, predict_set, train, Checkpoint, GroupBy, PreparedSet,
};
use bonenet::{Error, Model, ModelConfig};
use common::*;

#[test]
fn frozen_backbone_stays_at_initial_values() {
    let s = samples(24, 3);
    let set = prepared(&s, Region::Full);
    let cfg = ModelConfig { frozen_blocks: 5, ..tiny_model() };
    let model = Model::build(&cfg, 4).unwrap();
    let before = model.named_tensors();
    let out = train(model, &set, &set, &quick_train(3, 8, 1)).unwrap();
    for ((name, a), (_, b)) in before.iter().zip(out.last.named_tensors()) {
        if name.starts_with("block") {
            assert_eq!(a, &b, "{name} changed");
        } else if name.starts_with("head.fc1.weight") || name.starts_with("conn.") {
            assert_ne!(a, &b, "{name} did not train");
        }
    }
}

#[test]
fn partial_freeze_only_touches_later_blocks() {
    let s = samples(16, 5);
    let set = prepared(&s, Region::Full);
    let cfg = ModelConfig { frozen_blocks: 2, ..tiny_model() };
    let model = Model::build(&cfg, 4).unwrap();
    let before = model.named_tensors();
    let out = train(model, &set, &set, &quick_train(2, 8, 1)).unwrap();
    for ((name, a), (_, b)) in before.iter().zip(out.last.named_tensors()) {
        if name.starts_with("block1.") || name.starts_with("block2.") {
            assert_eq!(a, &b, "{name} changed");
        }
        if name == "block3.conv1.weight" || name == "block3.bn1.running_mean" {
            assert_ne!(a, &b, "{name} unchanged");
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise_at_f32() {
    let s = samples(20, 7);
    let set = prepared(&s, Region::Full);
    let out = train(Model::build(&tiny_model(), 1).unwrap(), &set, &set, &quick_train(2, 8, 2)).unwrap();
    let meta = serde_json::json!({"kind": "model", "model": tiny_model()});
    let ckpt = Checkpoint::from_regressor(&out.best, [1; 32], 2, out.final_lr, meta);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();

    let mut quantized = Model::build(&tiny_model(), 0).unwrap();
    quantized.load_named(&ckpt.tensor_map()).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    let back = loaded.load_model().unwrap();
    assert_eq!(predict_set(&back, &set).unwrap(), predict_set(&quantized, &set).unwrap());
    let diff: f64 = predict_set(&back, &set)
        .unwrap()
        .iter()
        .zip(predict_set(&out.best, &set).unwrap())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-2, "f32 storage moved predictions by {diff}");
}

#[test]
fn run_bookkeeping() {
    let s = samples(21, 9);
    let set = prepared(&s, Region::Full);
    let cfg = quick_train(4, 8, 3);
    let out = train(Model::build(&tiny_model(), 1).unwrap(), &set, &set, &cfg).unwrap();
    // 21 samples in batches of 8: 8 + 8 + 5 per epoch.
    assert_eq!(out.adam_steps, 12);
    assert_eq!(out.history.len(), 4);
    assert_eq!(out.history.iter().map(|h| h.epoch).collect::<Vec<_>>(), [1, 2, 3, 4]);
    let best = out.history.iter().map(|h| h.val_mae).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_val_mae, best);
    assert_eq!(out.history[out.best_epoch - 1].val_mae, best);
    assert_eq!(evaluate(&out.best, &set, GroupBy::None).unwrap().mae, best);
    let csv = history_csv(&out.history);
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn trailing_singleton_batch_is_dropped() {
    let s = samples(17, 2);
    let set = prepared(&s, Region::Full);
    let out = train(Model::build(&tiny_model(), 1).unwrap(), &set, &set, &quick_train(2, 8, 3)).unwrap();
    assert_eq!(out.adam_steps, 4);
}

#[test]
fn lr_trace_obeys_schedule() {
    let s = samples(12, 4);
    let set = prepared(&s, Region::Full);
    let cfg = bonenet::train::TrainConfig {
        lr0: 1e-6,
        lr_min: 4e-7,
        patience: 1,
        min_delta: 1e3,
        ..quick_train(8, 6, 1)
    };
    let out = train(Model::build(&tiny_model(), 1).unwrap(), &set, &set, &cfg).unwrap();
    let lrs: Vec<f64> = out.history.iter().map(|h| h.lr).collect();
    assert_eq!(lrs[0], 1e-6);
    for w in lrs.windows(2) {
        assert!(w[1] == w[0] || w[1] == w[0] * 0.8 || w[1] == 4e-7, "{lrs:?}");
        assert!(w[1] <= w[0]);
    }
    assert_eq!(*lrs.last().unwrap(), 4e-7);
}

#[test]
fn bad_inputs_are_rejected() {
    let s = samples(6, 1);
    let set = prepared(&s, Region::Full);
    let empty = PreparedSet { ids: vec![], images: vec![], ages: vec![], genders: vec![], ..set.clone() };
    let m = Model::build(&tiny_model(), 1).unwrap();
    assert!(matches!(train(m.clone(), &empty, &set, &quick_train(1, 2, 0)), Err(Error::EmptyDataset)));
    assert!(matches!(train(m.clone(), &set, &empty, &quick_train(1, 2, 0)), Err(Error::EmptyDataset)));
    assert!(matches!(train(m.clone(), &set, &set, &quick_train(1, 7, 0)), Err(Error::InvalidConfig(_))));
    let wrong = PreparedSet::new(&s, 64, Region::Full);
    assert!(train(m, &wrong, &wrong, &quick_train(1, 2, 0)).is_err());
}

#[test]
fn divergence_is_reported() {
    let s = samples(8, 1);
    let set = prepared(&s, Region::Full);
    let cfg = bonenet::train::TrainConfig {
        lr0: 1e300,
        loss: bonenet::train::LossKind::L2,
        ..quick_train(5, 4, 0)
    };
    match train(Model::build(&tiny_model(), 1).unwrap(), &set, &set, &cfg) {
        Err(Error::DivergedTraining { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|o| o.history)),
    }
}

#[test]
fn gender_report_recombines() {
    let s = samples(30, 8);
    let set = prepared(&s, Region::Full);
    let m = Model::build(&tiny_model(), 1).unwrap();
    let r = evaluate(&m, &set, GroupBy::Gender).unwrap();
    let total: usize = r.groups.iter().map(|g| g.count).sum();
    assert_eq!(total, 30);
    let weighted: f64 = r.groups.iter().map(|g| g.mae * g.count as f64).sum::<f64>() / 30.0;
    assert!((weighted - r.mae).abs() < 1e-9);
    let preds = m.predict(&set.eval_batch(&[0, 1])).unwrap();
    assert_eq!(preds.len(), 2);
}
