//! Vision Transformer inference with training-free token pruning.
//!
//! Patch importance is scored from the head-averaged self-attention matrix,
//! either by the column-wise ℓn-norm ("Col-Ln"), by the `[CLS]` attention row,
//! or at random. Col-Ln ranks patches exactly as the lowest Rényi column
//! entropy does for any order `n > 1`, which the [`metrics`] module checks
//! against an explicit entropy evaluation.
//!
//! The numeric layers ([`tensor`], [`attention`], [`metrics`], [`pruning`])
//! are generic over [`Scalar`] so the same code runs in `f32` for inference
//! and in `f64` for verification. The model, weight container and renderers
//! work in `f32`; the aliases below name the common instantiations.

// `!(x > y)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod error;
pub mod flops;
pub mod image;
pub mod metrics;
pub mod model;
pub mod pruning;
pub mod scalar;
pub mod tensor;
pub mod verify;
pub mod viz;
pub mod weights;

pub use error::{Error, Result, WeightFormatError};
pub use scalar::Scalar;

pub type Matrix = tensor::Matrix<f32>;
pub type Matrix64 = tensor::Matrix<f64>;
pub type AttentionMatrix = attention::AttentionMatrix<f32>;
pub type AttentionMatrix64 = attention::AttentionMatrix<f64>;
pub type TokenSequence = attention::TokenSequence<f32>;
pub type TokenSequence64 = attention::TokenSequence<f64>;
pub type ImportanceScores = metrics::ImportanceScores<f32>;
pub type ImportanceScores64 = metrics::ImportanceScores<f64>;
pub type PruneDecision = pruning::PruneDecision<f32>;
pub type PruneDecision64 = pruning::PruneDecision<f64>;
