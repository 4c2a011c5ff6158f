//! Reverse-mode automatic differentiation over dense tensors.

mod graph;
pub mod kernels;

pub use graph::{
    bce_value, log_sigmoid, sigmoid, smooth_l1_slope, smooth_l1_value, BatchMoments, Gradients, Graph, NodeId, BN_EPS,
};
pub use kernels::ConvGeom;
