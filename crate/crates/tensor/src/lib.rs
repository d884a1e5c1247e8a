//! Dense tensors, a reverse-mode tape, the handful of layers needed by the
//! point-cloud models, an ADAM optimizer, and the checkpoint container.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod param;
pub mod real;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use nn::{BatchNorm, Conv1x1, ConvBnRelu, ConvTranspose2d, Graph, Linear, Mode, SharedMlp};
pub use optim::{Adam, AdamConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use real::{DType, Real};
pub use tape::{Gradients, NormStats, Tape, Var};
pub use tensor::Tensor;
