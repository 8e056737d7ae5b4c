//! Tensor type, layer kernels, and the graph executor.

mod exec;
mod graph;
pub mod ops;
mod param;
mod tensor;

pub use exec::{run_graph, validate_weights, ExecConfig, Executor};
pub use graph::{Graph, GraphBuilder, GraphInput, LayerSpec, Node, Source, SplitPart};
pub use param::Param;
pub use tensor::{Shape, Tensor};
