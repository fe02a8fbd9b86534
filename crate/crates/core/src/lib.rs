//! Motion-language modeling at desk scale: residual-quantized motion
//! tokens, multi-stream sequence layouts, a causal transformer with
//! modality-routed blocks, and a three-stage training pipeline.
//!
//! Numeric code is generic over the scalar type. The aliases below fix the
//! common choices: `f64` for training and probes, exact rationals for
//! quantizer identities.

pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod patterns;
pub mod pipeline;
pub mod rvq;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::{Field, Scalar};

pub type Tensor64 = autodiff::Tensor<f64>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type RvqStack64 = rvq::RvqStack<f64>;
/// Quantizer over arbitrary-precision rationals; residual sums are exact.
pub type ExactRvqStack = rvq::RvqStack<num_rational::BigRational>;
pub type Tokenizer = rvq::TokenizerModel<f64>;
pub type Model = backbone::Backbone<f64>;
