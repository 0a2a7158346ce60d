//! Interpretable image-to-report diagnosis network at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`engine`]: tensors on a define-by-run tape with reverse-mode gradients and a
//!   finite-difference checker.
//! - [`image_model`]: the ensemble-connection residual network producing conv maps
//!   and a pooled feature.
//! - [`aas`]: the bias-free pooled classifier whose class activation map steers attention.
//! - [`language`]: vocabulary, attention LSTM, task batching, generation and scoring.
//! - [`trainer`]: the joint objective with the composite image-model update, plus the
//!   pretrain/fine-tune baselines.
//! - [`synth`]: procedural image/report corpus.
//! - [`harness`]: metrics, attention export and the command-line front end.

pub mod aas;
pub mod checkpoint;
pub mod engine;
pub mod error;
pub mod harness;
pub mod image_model;
pub mod language;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
