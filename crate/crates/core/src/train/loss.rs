use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Mean absolute error; subgradient 0 where prediction equals target.
    #[default]
    L1,
    /// Mean squared error.
    L2,
}

/// Scalar loss node comparing `pred` and `target` (both `[B, 1]`).
pub fn loss(g: &mut Graph, pred: NodeId, target: NodeId, kind: LossKind) -> Result<NodeId> {
    if g.shape(pred) != g.shape(target) {
        return Err(Error::shape(format!(
            "loss between {:?} and {:?}",
            g.shape(pred),
            g.shape(target)
        )));
    }
    let diff = g.sub(pred, target)?;
    let per = match kind {
        LossKind::L1 => g.abs(diff),
        LossKind::L2 => g.mul(diff, diff)?,
    };
    Ok(g.reduce_mean(per))
}
