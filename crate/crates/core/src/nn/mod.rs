//! Differentiable building blocks with explicit forward and backward passes.
//!
//! Every op works on a single `C x H x W` sample. Backward functions take the
//! forward inputs (recomputing what they need) and accumulate parameter
//! gradients into a [`crate::params::GradStore`].

mod activation;
mod conv;
mod gemm;
mod norm;
mod pool;
mod upsample;

pub use activation::{leaky_relu, leaky_relu_backward};
pub use conv::Conv2d;
pub use norm::{LayerNorm, LayerNormCache};
pub use pool::{avg_pool2, avg_pool2_backward, max_pool2, max_pool2_backward};
pub use upsample::{bilinear_upsample, bilinear_upsample_backward};
