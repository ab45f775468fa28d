//! Joint low-rank compression of transformer layers.
//!
//! Attention weights come in *product twins*: `(W_{Q_h}ᵀ, W_{K_h})` and
//! `(W_{V_h}ᵀ, W_{O_h}ᵀ)` only ever act through their product, so each pair is
//! replaced by a truncated SVD of that product, widened with LoRA columns.
//! Feed-forward weights are factored one at a time. Every compressed layer is
//! then fine-tuned on its own, against hidden states captured from the
//! original model, which makes layers trainable in parallel and swappable
//! afterwards.
//!
//! Module map:
//!
//! - [`linalg`]: dense matrices, Jacobi SVD, rank truncation
//! - [`model`]: the reference layer (forward + analytic backward), toy model
//! - [`compress`]: twin factorization, rank plans, parameter accounting
//! - [`finetune`]: layer objective, Adam, ablation modes, gradient checker
//! - [`quant`]: per-row int8 and quantization-aware fine-tuning
//! - [`assemble`]: mixed original/compressed models and sweeps
//! - [`store`]: the `ADPT` container format
//! - [`pipeline`]: toy tasks, configs, and the end-to-end stages the CLI runs

pub mod assemble;
pub mod compress;
pub mod error;
pub mod finetune;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod store;

#[cfg(doctest)]
mod book;

pub use error::{Error, FormatError, Result};
