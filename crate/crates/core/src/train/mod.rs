//! Loss, optimizer, learning-rate schedule, the training loop, evaluation
//! and checkpoint I/O.

mod adam;
mod checkpoint;
mod eval;
mod loss;
mod plateau;
mod trainer;

pub use adam::{adam_step, Adam, AdamConfig};
pub use checkpoint::{fingerprint, hex, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use eval::{evaluate, mae, predict_set, GroupBy, GroupMae, MaeReport};
pub use loss::{loss, LossKind};
pub use plateau::{plateau_step, PlateauConfig, PlateauState};
pub use trainer::{history_csv, train, HistoryRow, PreparedSet, TrainConfig, TrainOutcome};

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::layers::BatchStats;
use crate::model::{ForwardOptions, ForwardOutput, Model};
use crate::tensor::Tensor;

/// Anything the training loop can fit: a single [`Model`] or an early-fused
/// ensemble.
pub trait Regressor: Clone + Send + Sync {
    fn input_size(&self) -> usize;
    fn forward_graph(&self, g: &mut Graph, x: NodeId, opts: &ForwardOptions) -> Result<ForwardOutput>;
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));
    fn is_trainable(&self, name: &str) -> bool;
    fn apply_bn_stats(&mut self, stats: &[(String, BatchStats)]);
    fn set_target_scale(&mut self, mean: f64, std: f64);
    /// Parameters and buffers, in a fixed order.
    fn named_tensors(&self) -> Vec<(String, Tensor)>;

    /// Eval-mode ages for `batch: [B, 1, S, S]`.
    fn predict(&self, batch: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let out = self.forward_graph(&mut g, x, &ForwardOptions::eval())?;
        Ok(g.value(out.output).data().to_vec())
    }
}

impl Regressor for Model {
    fn input_size(&self) -> usize {
        Model::input_size(self)
    }
    fn forward_graph(&self, g: &mut Graph, x: NodeId, opts: &ForwardOptions) -> Result<ForwardOutput> {
        Model::forward_graph(self, g, x, opts)
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        Model::visit_params_mut(self, f)
    }
    fn is_trainable(&self, name: &str) -> bool {
        Model::is_trainable(self, name)
    }
    fn apply_bn_stats(&mut self, stats: &[(String, BatchStats)]) {
        Model::apply_bn_stats(self, stats)
    }
    fn set_target_scale(&mut self, mean: f64, std: f64) {
        Model::set_target_scale(self, mean, std)
    }
    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        Model::named_tensors(self)
    }
}
