use crate::error::Result;
use crate::graph::{Graph, NodeId};

/// Max pooling; the backward pass routes each upstream gradient to the
/// window's first maximal element.
pub fn maxpool2d(g: &mut Graph, x: NodeId, window: usize, stride: usize) -> Result<NodeId> {
    g.maxpool2d(x, window, stride)
}
