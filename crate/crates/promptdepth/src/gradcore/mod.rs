//! Reverse-mode automatic differentiation over dense f32 tensors: exactly the
//! op set the rest of the crate needs, plus finite-difference verification.

mod check;
pub mod fft;
mod graph;
mod kernels;
mod tensor;

pub use check::gradient_check;
pub use fft::{fft2_real, ifft2_complex};
pub use graph::{Graph, NodeId, ReduceKind};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
