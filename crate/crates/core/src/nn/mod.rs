//! Minimal convolutional network engine: layers, graph, optimizer.

mod adam;
mod graph;
pub mod ops;
mod tensor;

pub use adam::Adam;
pub use graph::{Graph, Mode, Node, NodeId, Op, Trace};
pub use ops::{Activation, Padding, Pads, Param, PoolKind};
pub use tensor::{Shape, Tensor};
