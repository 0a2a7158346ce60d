//! Reverse-mode differentiation over dense tensors.

pub mod gradcheck;
pub mod kernels;
pub mod param;
pub mod tape;

pub use gradcheck::{grad_check, grad_check_params, DEFAULT_EPS};
pub use param::{sgd_step, ParamId, ParamStore, Parameter};
pub use tape::{concat, concat_channels, BnMode, BnStats, Gradients, Tape, Var, BN_EPS};

use rand::Rng;

use crate::tensor::Tensor;

/// He-normal initialization: `N(0, sqrt(2 / fan_in))`.
pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Embedding initialization: `U(-0.08, 0.08)`.
pub fn embed_uniform<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::uniform(shape, -0.08, 0.08, rng)
}
