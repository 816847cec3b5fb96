//! Minimal reverse-mode automatic differentiation for volumetric networks.
//!
//! The engine is deliberately small: dense row-major tensors, an eager tape
//! ([`Graph`]), a handful of fused kernels (convolution via im2col, group and
//! layer normalisation, single-head attention) and an Adam optimiser. Every
//! operator is generic over [`Real`], so models built for `f32` training can
//! be re-evaluated in `f64` for finite-difference checks.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod real;
pub mod tensor;

pub use error::{NnError, Result};
pub use graph::{Gradients, Graph, ParamGrads, Var};
pub use kernels::ConvGeom;
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
