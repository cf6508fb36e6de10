//! Desk-scale laboratory for adversarial transferability experiments.
//!
//! The crate trains small surrogate classifiers under a range of mechanisms
//! (standard, adversarial, augmented, gradient-regularized, sharpness-aware),
//! generates transfer attacks against them, and measures the smoothness /
//! gradient-similarity diagnostics that govern how well those attacks carry
//! over to independently trained targets.

pub mod attacks;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod stats;
pub mod tensor;
pub mod training;

pub use tensor::Tensor;
