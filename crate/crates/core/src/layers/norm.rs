use serde::{Deserialize, Serialize};

use super::Mode;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel statistics of one train-mode batch; `var` is unbiased.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: Mode,
}

impl BatchNormLayer {
    pub fn new(channels: usize) -> Self {
        BatchNormLayer {
            gamma: Tensor::from_vec(&[channels], vec![1.0; channels]).expect("shape"),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::from_vec(&[channels], vec![1.0; channels]).expect("shape"),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
            mode: Mode::Train,
        }
    }

    /// Applies the layer. Train mode normalizes with batch statistics and
    /// returns them; running estimates are left untouched (see
    /// [`Self::update_running`]). Eval mode is a fixed per-channel affine map.
    pub fn forward(
        &self,
        g: &mut Graph,
        prefix: &str,
        x: NodeId,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        self.apply(g, prefix, x, self.mode)
    }

    /// [`Self::forward`] with an explicit mode.
    pub fn apply(
        &self,
        g: &mut Graph,
        prefix: &str,
        x: NodeId,
        mode: Mode,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let gamma = g.param(format!("{prefix}.gamma"), self.gamma.clone());
        let beta = g.param(format!("{prefix}.beta"), self.beta.clone());
        match mode {
            Mode::Train => {
                let shape = g.shape(x).to_vec();
                if shape.first().copied().unwrap_or(0) < 2 {
                    return Err(Error::DegenerateBatch(shape.first().copied().unwrap_or(0)));
                }
                let (y, mean, var) = g.batch_norm(x, gamma, beta, self.epsilon, None)?;
                let n = (shape[0] * shape[2] * shape[3]) as f64;
                let var = var.iter().map(|v| v * n / (n - 1.0)).collect();
                Ok((y, Some(BatchStats { mean, var })))
            }
            Mode::Eval => {
                let (y, _, _) = g.batch_norm(
                    x,
                    gamma,
                    beta,
                    self.epsilon,
                    Some((self.running_mean.data(), self.running_var.data())),
                )?;
                Ok((y, None))
            }
        }
    }

    /// `running ← (1 − m)·running + m·batch`.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }

    /// [`Self::forward`] followed by the running-statistics update.
    pub fn forward_mut(&mut self, g: &mut Graph, prefix: &str, x: NodeId) -> Result<NodeId> {
        let (y, stats) = self.forward(g, prefix, x)?;
        if let Some(stats) = stats {
            self.update_running(&stats);
        }
        Ok(y)
    }
}
