//! Hierarchical-feature convolutional regressor for whole-body bone age
//! estimation, built on a small define-by-run autodiff engine.
//!
//! The crate covers the whole pipeline: synthetic skeleton data
//! ([`data`]), the network ([`model`]), training ([`train`]), ensembling
//! ([`fusion`]) and Grad-CAM attribution ([`explain`]).

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{BinaryOp, Gradients, Graph, NodeId, Operand};
pub use layers::Mode;
pub use tensor::{Init, Tensor};
pub use model::{Arch, ForwardOptions, Model, ModelConfig};
