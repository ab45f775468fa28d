//! Reference transformer layer and toy token model.
//!
//! The attention block stores every projection head-stacked as an
//! `(H·k) × d` matrix, where `k` is the per-head inner width. For an original
//! layer `k = d_h` and the stacks are exactly `W_Q`, `W_K`, `W_V` and `W_Oᵀ`.
//! For a compressed layer `k = r_a + l_a` and each `k`-row head block holds
//! `r_a` spectral rows followed by `l_a` LoRA rows. Both parameterisations go
//! through the same forward and backward code.

mod backward;
mod forward;
mod layer;
mod network;

pub use backward::{layer_backward, LayerGradients};
pub use forward::{layer_forward, layer_forward_batch, AttentionTrace, ForwardCache};
pub use layer::{
    Attention, ClassMap, CompressedLayerParams, FeedForward, HeadLayout, LayerNorm, LayerParams,
    LayerSpec, LayerWeights, Linear, LinearLayout, ParamClass, ParamMut, ParamRef,
};
pub use network::{
    capture_all_layers, capture_hidden_states, model_forward, sinusoidal_positions,
    HiddenStatePair, HiddenStatePairSet, LayerStack, Model, ModelHead,
};

pub(crate) use backward::backward_from_cache;
pub(crate) use forward::forward_cached;
pub(crate) use network::model_forward_backward;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance floor inside layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Model geometry. `n_heads · d_head == d_model` always holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub vocab: usize,
}

impl ModelDims {
    pub fn new(
        d_model: usize,
        n_heads: usize,
        d_head: usize,
        d_ff: usize,
        n_layers: usize,
        vocab: usize,
    ) -> Result<Self> {
        let dims = Self {
            d_model,
            n_heads,
            d_head,
            d_ff,
            n_layers,
            vocab,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_head == 0 || self.d_ff == 0 {
            return Err(Error::Config(format!("dimensions must be positive: {self:?}")));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::Config(format!(
                "n_heads ({}) × d_head ({}) must equal d_model ({})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        Ok(())
    }

    /// Parameters in `W_Q, W_K, W_V, W_O` of one layer.
    pub fn attention_params(&self) -> usize {
        4 * self.d_model * self.d_model
    }

    /// Parameters in `W_1, W_2` of one layer.
    pub fn ff_params(&self) -> usize {
        2 * self.d_model * self.d_ff
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)),
            Activation::Relu => x.max(0.0),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Architecture: geometry plus the choices the layer algebra leaves open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dims: ModelDims,
    #[serde(default)]
    pub activation: Activation,
    /// `false`: post-LN attention and a residual-free feed-forward block.
    /// `true`: pre-LN with residuals around both blocks (two layer norms).
    #[serde(default)]
    pub ff_residual_pre_ln: bool,
    /// Causal masking in self-attention.
    #[serde(default)]
    pub causal: bool,
}

impl ModelConfig {
    pub fn new(dims: ModelDims) -> Self {
        Self {
            dims,
            activation: Activation::Gelu,
            ff_residual_pre_ln: false,
            causal: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()
    }

    pub(crate) fn softmax_scale(&self) -> f64 {
        1.0 / (self.dims.d_head as f64).sqrt()
    }
}

#[cfg(test)]
mod tests;
