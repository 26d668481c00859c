//! Dense-tensor engine: NCHW tensors, reverse-mode autodiff, weight
//! initialization, and Adam.

pub mod graph;
pub mod init;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use graph::{Graph, PadMode, Var};
pub use optim::{lr_schedule, Adam};
pub use params::ModelParams;
pub use scalar::Scalar;
pub use tensor::Tensor;
