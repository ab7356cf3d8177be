//! Small reverse-mode differentiable array engine covering the operations
//! the encoder, decoder and PixelCNN stacks need.

mod check;
mod graph;
pub mod init;
mod kernels;
mod real;
mod tensor;

pub use check::finite_diff_check;
pub use graph::{sigmoid, BatchMoments, CustomOp, Graph, Mode, Var};
pub use kernels::{conv_out_len, conv_transpose_out_len, Padding};
pub use real::{DType, Real};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
