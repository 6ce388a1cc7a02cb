//! Small dense-tensor library with reverse-mode automatic differentiation.
//!
//! All arithmetic is generic over [`Scalar`] (`f32` or `f64`). The crate is
//! deliberately single-threaded: a graph is built per forward pass out of
//! reference-counted [`Var`] nodes and consumed by [`Var::backward`].

mod autograd;
pub mod container;
mod error;
pub mod gradcheck;
pub mod nn;
mod ops;
mod param;
mod scalar;
mod tensor;

pub use container::{load_params, read_tensors, save_params, write_tensors, Metadata};
pub use nn::Mode;
pub use autograd::{is_grad_enabled, no_grad, Gradients, Var};
pub use error::{Result, TensorError};
pub use ops::{resize_bilinear_planes, softmax_row, ConvOpts, PadMode};
pub use param::{join_path, HasParams, Param, ParamId};
pub use scalar::Scalar;
pub use tensor::{broadcast_shape, numel, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Var32 = Var<f32>;
pub type Var64 = Var<f64>;
