pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod costbench;
pub mod data;
pub mod instrument;
pub mod masking;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;
pub mod trimming;

pub use autograd::{Gradients, Tape, Var};
pub use scalar::Scalar;
pub use tensor::{Tensor, TensorError};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
