use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{loss, predict_set, Adam, AdamConfig, LossKind, PlateauConfig, PlateauState, Regressor};
use super::eval::mae;
use super::plateau_step;
use crate::data::augment::{self, CropParams, Prepared};
use crate::data::{crop_region, Gender, Region, Sample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::ForwardOptions;
use crate::tensor::Tensor;
use crate::{par, rng};

const TAG_SHUFFLE: u64 = 1;
const TAG_CROP: u64 = 2;
const TAG_DROPOUT: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub plateau_factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// Random crop + flip during training; off means center crops only.
    pub augment: bool,
    /// Fraction of the dataset used for training; the rest validates.
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 130,
            batch_size: 32,
            lr0: 3e-4,
            lr_min: 1e-7,
            plateau_factor: 0.8,
            patience: 10,
            min_delta: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            loss: LossKind::L1,
            augment: true,
            train_fraction: 0.7,
        }
    }
}

impl TrainConfig {
    /// First violated constraint as `(field, message)`.
    pub fn check(&self) -> Option<(&'static str, String)> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if self.epochs == 0 {
            return Some(("epochs", "must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Some(("batch_size", "must be at least 1".into()));
        }
        if !pos(self.lr0) {
            return Some(("lr0", format!("must be positive, got {}", self.lr0)));
        }
        if !pos(self.lr_min) || self.lr_min > self.lr0 {
            return Some(("lr_min", format!("must be in (0, lr0], got {}", self.lr_min)));
        }
        if !unit(self.plateau_factor) {
            return Some(("plateau_factor", format!("must be in (0, 1), got {}", self.plateau_factor)));
        }
        if self.patience == 0 {
            return Some(("patience", "must be at least 1".into()));
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return Some(("min_delta", format!("must be non-negative, got {}", self.min_delta)));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Some(("beta1", format!("must be in [0, 1), got {}", self.beta1)));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Some(("beta2", format!("must be in [0, 1), got {}", self.beta2)));
        }
        if !pos(self.adam_eps) {
            return Some(("adam_eps", format!("must be positive, got {}", self.adam_eps)));
        }
        if !unit(self.train_fraction) {
            return Some(("train_fraction", format!("must be in (0, 1), got {}", self.train_fraction)));
        }
        None
    }

    pub fn validate(&self) -> Result<()> {
        match self.check() {
            Some((field, msg)) => Err(Error::InvalidConfig(format!("train.{field}: {msg}"))),
            None => Ok(()),
        }
    }

    pub fn plateau(&self) -> PlateauConfig {
        PlateauConfig {
            factor: self.plateau_factor,
            patience: self.patience,
            lr_min: self.lr_min,
            min_delta: self.min_delta,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Samples resized once for a fixed network input; crops are cut per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSet {
    pub target: usize,
    pub region: Region,
    pub ids: Vec<u32>,
    pub images: Vec<Prepared>,
    pub ages: Vec<f64>,
    pub genders: Vec<Gender>,
}

impl PreparedSet {
    pub fn new(samples: &[Sample], target: usize, region: Region) -> Self {
        let images = par::map_slice(samples, |s| augment::prepare(&crop_region(&s.image, region), target));
        PreparedSet {
            target,
            region,
            ids: samples.iter().map(|s| s.id).collect(),
            images,
            ages: samples.iter().map(|s| s.age_years).collect(),
            genders: samples.iter().map(|s| s.gender).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ages.is_empty()
    }

    /// `[B, 1, S, S]` batch of the samples at `idx` cut with `crops`.
    pub fn batch(&self, idx: &[usize], crops: &[CropParams]) -> Tensor {
        let s = self.target;
        let mut data = Vec::with_capacity(idx.len() * s * s);
        let parts = par::map_range(idx.len(), |k| augment::crop(&self.images[idx[k]], s, crops[k]));
        for p in parts {
            data.extend_from_slice(p.data());
        }
        Tensor::from_vec(&[idx.len(), 1, s, s], data).expect("batch shape")
    }

    /// Center-cropped batch.
    pub fn eval_batch(&self, idx: &[usize]) -> Tensor {
        self.batch(idx, &vec![CropParams::center(); idx.len()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

/// Formats with 9 significant digits.
fn sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let mag = v.abs().log10().floor() as i32;
    if (-5..=12).contains(&mag) {
        format!("{:.*}", (8 - mag).max(0) as usize, v)
    } else {
        format!("{v:.8e}")
    }
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("epoch,train_loss,val_mae,lr\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, sig9(r.train_loss), sig9(r.val_mae), sig9(r.lr)));
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    /// Model state after the epoch with the lowest validation MAE.
    pub best: M,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    /// Model state after the last epoch.
    pub last: M,
    pub history: Vec<HistoryRow>,
    /// Learning rate the schedule would use for the next epoch.
    pub final_lr: f64,
    pub adam_steps: u64,
}

/// Fits `model` on `train_set`, tracking validation MAE each epoch.
///
/// The output affine map is first set to the mean and standard deviation
/// of the training targets so the network learns a standardized target.
/// A trailing batch of one sample is dropped, since train-mode batch norm
/// needs at least two.
pub fn train<M: Regressor>(
    mut model: M,
    train_set: &PreparedSet,
    val_set: &PreparedSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<M>> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size > train_set.len() {
        return Err(Error::InvalidConfig(format!(
            "batch size {} exceeds training set size {}",
            cfg.batch_size,
            train_set.len()
        )));
    }
    for set in [train_set, val_set] {
        if set.target != model.input_size() {
            return Err(Error::shape(format!(
                "data prepared for {} px, model expects {}",
                set.target,
                model.input_size()
            )));
        }
    }

    let n = train_set.len() as f64;
    let mean = train_set.ages.iter().sum::<f64>() / n;
    let var = train_set.ages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    model.set_target_scale(mean, std);

    let trainable: BTreeSet<String> = model
        .named_tensors()
        .into_iter()
        .map(|(name, _)| name)
        .filter(|name| model.is_trainable(name))
        .collect();

    let mut adam = Adam::new(cfg.adam());
    let mut plateau = PlateauState::new(cfg.lr0);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = (model.clone(), 0, f64::INFINITY);

    for epoch in 1..=cfg.epochs {
        let lr = plateau.current_lr;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[TAG_SHUFFLE, epoch as u64]));

        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (k, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < 2 && train_set.len() > 1 {
                continue;
            }
            let crops: Vec<CropParams> = idx
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        CropParams::random(&mut rng::stream(cfg.seed, &[TAG_CROP, epoch as u64, i as u64]))
                    } else {
                        CropParams::center()
                    }
                })
                .collect();
            let x = train_set.batch(idx, &crops);
            let y: Vec<f64> = idx.iter().map(|&i| train_set.ages[i]).collect();

            let mut g = Graph::new();
            let xn = g.constant(x);
            let yn = g.constant(Tensor::from_vec(&[idx.len(), 1], y)?);
            let dropout_seed = rng::derive_seed(cfg.seed, &[TAG_DROPOUT, epoch as u64, k as u64]);
            let out = model.forward_graph(&mut g, xn, &ForwardOptions::train(dropout_seed))?;
            let l = loss(&mut g, out.output, yn, cfg.loss)?;
            let value = g.value(l).item();
            if !value.is_finite() {
                return Err(Error::DivergedTraining { epoch, loss: value });
            }
            let grads = g.backward(l)?.by_name();

            adam.begin_step();
            model.visit_params_mut(&mut |name, p| {
                if let Some(gr) = grads.get(name).filter(|_| trainable.contains(name)) {
                    adam.update(name, p, gr, lr);
                }
            });
            model.apply_bn_stats(&out.bn_stats);
            loss_sum += value * idx.len() as f64;
            seen += idx.len();
        }

        let train_loss = loss_sum / seen.max(1) as f64;
        let val_mae = mae(&predict_set(&model, val_set)?, &val_set.ages);
        if !val_mae.is_finite() {
            return Err(Error::DivergedTraining { epoch, loss: val_mae });
        }
        history.push(HistoryRow {
            epoch,
            train_loss,
            val_mae,
            lr,
        });
        if val_mae < best.2 {
            best = (model.clone(), epoch, val_mae);
        }
        plateau = plateau_step(plateau, val_mae, &cfg.plateau())?;
    }

    Ok(TrainOutcome {
        best: best.0,
        best_epoch: best.1,
        best_val_mae: best.2,
        last: model,
        history,
        final_lr: plateau.current_lr,
        adam_steps: adam.steps(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_format() {
        assert_eq!(sig9(3e-4), "0.000300000000");
        assert_eq!(sig9(12.5), "12.5000000");
        assert_eq!(sig9(1e-7), "1.00000000e-7");
        assert_eq!(sig9(0.0), "0");
    }

    #[test]
    fn history_header() {
        let rows = [HistoryRow { epoch: 1, train_loss: 2.0, val_mae: 1.5, lr: 3e-4 }];
        let csv = history_csv(&rows);
        assert!(csv.starts_with("epoch,train_loss,val_mae,lr\n1,2.00000000,1.50000000,"));
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().check().is_none());
        let bad = TrainConfig { lr0: -1.0, ..TrainConfig::default() };
        assert_eq!(bad.check().unwrap().0, "lr0");
        let bad = TrainConfig { plateau_factor: 1.0, ..TrainConfig::default() };
        assert_eq!(bad.check().unwrap().0, "plateau_factor");
        let bad = TrainConfig { lr_min: 1.0, ..TrainConfig::default() };
        assert_eq!(bad.check().unwrap().0, "lr_min");
    }
}
