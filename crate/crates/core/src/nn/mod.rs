//! Minimal CPU building blocks for the backbones and heads.
//!
//! Tensors are single samples in channel-major layout; batching happens one
//! level up with per-sample parallelism and an ordered gradient reduction, so
//! results do not depend on the number of worker threads.

mod adam;
mod gemm;
mod layers;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use layers::{Conv2d, Linear, Op, OpCache, ResidualBlock, SqueezeExcite, Sequential};
pub use params::{Grads, Param, ParamId, ParamStore};
pub use tensor::{resize_bilinear, Tensor3};

pub(crate) use gemm::gemm;
