//! Reverse-mode automatic differentiation over small dense tensors.

mod checkpoint;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use graph::{Graph, Var};
pub use params::{sgd_momentum_step, Bound, ParamId, ParamSet, Sgd};
pub use tensor::{Element, Tensor};
