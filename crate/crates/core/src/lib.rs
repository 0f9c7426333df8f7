//! Decoupled side-adapter networks for multimodal sequential recommendation.
//!
//! Frozen encoders emit per-layer pooled hidden states which are cached to
//! disk once; small gated side towers, a fusion layer and a causal sequence
//! encoder are trained on top of them with an in-batch debiased softmax.

pub mod backbone;
pub mod cache;
pub mod cli;
pub mod costmodel;
pub mod error;
pub mod nn;
pub mod recsys;
pub mod sanet;
pub mod tensor;

pub use error::{Error, Result};
