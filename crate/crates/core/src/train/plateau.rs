use crate::error::{Error, Result};

/// Reduce-on-plateau learning-rate schedule driven by a validation metric
/// (lower is better).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauState {
    pub best_val: f64,
    pub epochs_since_improve: usize,
    pub current_lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub lr_min: f64,
    /// A metric counts as an improvement only if it beats the best by more
    /// than this.
    pub min_delta: f64,
}

impl PlateauState {
    pub fn new(lr0: f64) -> Self {
        PlateauState {
            best_val: f64::INFINITY,
            epochs_since_improve: 0,
            current_lr: lr0,
        }
    }
}

pub fn plateau_step(state: PlateauState, val_metric: f64, cfg: &PlateauConfig) -> Result<PlateauState> {
    if !val_metric.is_finite() {
        return Err(Error::InvalidMetric(val_metric));
    }
    let mut next = state;
    if val_metric < state.best_val - cfg.min_delta {
        next.best_val = val_metric;
        next.epochs_since_improve = 0;
        return Ok(next);
    }
    next.epochs_since_improve += 1;
    if next.epochs_since_improve >= cfg.patience {
        next.current_lr = (next.current_lr * cfg.factor).max(cfg.lr_min);
        next.epochs_since_improve = 0;
    }
    Ok(next)
}
