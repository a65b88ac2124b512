//! Reverse-mode automatic differentiation over dense 2-D arrays, plus the
//! Adam optimizer and exponential learning-rate decay.

mod graph;
pub mod gradcheck;
mod params;
mod schedule;
mod tensor;

pub use graph::{Activation, Graph, ScalarFn, Var};
pub(crate) use graph::posenc_values;
pub use params::{AdamConfig, Param, ParamId, ParamStore};
pub use schedule::LrSchedule;
pub use tensor::Tensor;
