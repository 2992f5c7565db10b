//! Layers built on the graph primitives. Each layer owns its parameters and
//! registers them on the graph under `<prefix>.<param>` when applied.

mod conv;
mod dropout;
mod linear;
mod norm;
mod pool;

pub use conv::Conv2dLayer;
pub use dropout::DropoutLayer;
pub use linear::LinearLayer;
pub use norm::{BatchNormLayer, BatchStats, BN_EPSILON, BN_MOMENTUM};
pub use pool::maxpool2d;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}
