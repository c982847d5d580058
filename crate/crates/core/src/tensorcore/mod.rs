//! Minimal dense-tensor engine: the layer catalog the stitching networks
//! need, reverse-mode gradients over a static graph, and Adam.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, rel_err};
pub use graph::{Activations, Gradients, Graph, LayerKind, Node, NodeId, ParamId, ParamInfo, ResizeTarget, Topology};
pub use tensor::{Shape4, Tensor4};
