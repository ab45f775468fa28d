//! Product-twin factorization of attention, independent factorization of the
//! feed-forward block, rank planning and parameter accounting.

mod accounting;
mod plan;
mod twin;

pub use accounting::{accounting, accounting_for_plan, LayerSize, SizeReport};
pub use plan::{feasible_target_range, make_plan, make_plan_with, PlanRules};
pub use twin::{
    compress_attention, compress_ff, compress_layer, twin_factor, FactorInit, FfFactors,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelDims;

/// Spectral and LoRA ranks for one layer.
///
/// `r_a, l_a` apply per attention head, `r_f, l_f` to each feed-forward matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankPlan {
    pub r_a: usize,
    pub l_a: usize,
    pub r_f: usize,
    pub l_f: usize,
}

impl RankPlan {
    pub fn new(dims: &ModelDims, r_a: usize, l_a: usize, r_f: usize, l_f: usize) -> Result<Self> {
        let plan = Self { r_a, l_a, r_f, l_f };
        plan.validate(dims)?;
        Ok(plan)
    }

    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        let ff_cap = dims.d_model.min(dims.d_ff);
        if self.r_a + self.l_a > dims.d_head {
            return Err(Error::Plan(format!(
                "attention ranks r_a + l_a = {} exceed d_head = {}",
                self.r_a + self.l_a,
                dims.d_head
            )));
        }
        if self.r_f + self.l_f > ff_cap {
            return Err(Error::Plan(format!(
                "feed-forward ranks r_f + l_f = {} exceed min(d, d_ff) = {ff_cap}",
                self.r_f + self.l_f
            )));
        }
        if self.r_a < self.l_a || self.r_f < self.l_f {
            return Err(Error::Plan(format!(
                "spectral rank must be at least the LoRA rank: {self:?}"
            )));
        }
        if self.r_a == 0 || self.r_f == 0 {
            return Err(Error::Plan(format!("spectral ranks must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Plan that keeps every product exactly: `r_a = d_h`, `r_f = min(d, d_ff)`, no LoRA.
    pub fn full_rank(dims: &ModelDims) -> Self {
        Self {
            r_a: dims.d_head,
            l_a: 0,
            r_f: dims.d_model.min(dims.d_ff),
            l_f: 0,
        }
    }

    pub fn attention_width(&self) -> usize {
        self.r_a + self.l_a
    }

    pub fn ff_width(&self) -> usize {
        self.r_f + self.l_f
    }

    /// `(r_a + l_a) / d_h`.
    pub fn attention_retained(&self, dims: &ModelDims) -> f64 {
        self.attention_width() as f64 / dims.d_head as f64
    }

    /// `(r_f + l_f)(d + d_ff) / (d · d_ff)`.
    pub fn ff_retained(&self, dims: &ModelDims) -> f64 {
        let (d, dff) = (dims.d_model as f64, dims.d_ff as f64);
        self.ff_width() as f64 * (d + dff) / (d * dff)
    }

    /// Parameter-weighted retained fraction of attention + feed-forward weights.
    pub fn retained_fraction(&self, dims: &ModelDims) -> f64 {
        let a = dims.attention_params() as f64;
        let f = dims.ff_params() as f64;
        (a * self.attention_retained(dims) + f * self.ff_retained(dims)) / (a + f)
    }
}

/// What to do with one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum LayerPlan {
    Keep,
    Compress { ranks: RankPlan, quantize: bool },
}

/// Per-layer compression decisions for a whole model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionPlan {
    pub layers: Vec<LayerPlan>,
}

impl CompressionPlan {
    /// The same ranks for every layer.
    pub fn uniform(dims: &ModelDims, ranks: RankPlan, quantize: bool) -> Result<Self> {
        ranks.validate(dims)?;
        Ok(Self {
            layers: vec![LayerPlan::Compress { ranks, quantize }; dims.n_layers],
        })
    }

    /// Compresses only `indices`.
    pub fn selected(
        dims: &ModelDims,
        ranks: RankPlan,
        quantize: bool,
        indices: &[usize],
    ) -> Result<Self> {
        let mut layers = vec![LayerPlan::Keep; dims.n_layers];
        for &i in indices {
            if i >= dims.n_layers {
                return Err(Error::Plan(format!("layer {i} out of range")));
            }
            layers[i] = LayerPlan::Compress { ranks, quantize };
        }
        let plan = Self { layers };
        plan.validate(dims)?;
        Ok(plan)
    }

    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        if self.layers.len() != dims.n_layers {
            return Err(Error::Plan(format!(
                "plan covers {} layers, model has {}",
                self.layers.len(),
                dims.n_layers
            )));
        }
        for l in &self.layers {
            if let LayerPlan::Compress { ranks, .. } = l {
                ranks.validate(dims)?;
            }
        }
        Ok(())
    }

    pub fn compressed_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerPlan::Compress { .. }))
            .map(|(i, _)| i)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn whisper_base() -> ModelDims {
        ModelDims::new(512, 8, 64, 2048, 6, 51865).unwrap()
    }

    #[test]
    fn retained_fractions_match_factor_formulas() {
        let dims = whisper_base();
        let plan = RankPlan::new(&dims, 32, 8, 162, 18).unwrap();
        assert_eq!(plan.attention_retained(&dims), 40.0 / 64.0);
        assert!((plan.ff_retained(&dims) - 0.439453125).abs() < 1e-12);
        let expected = (1.0 / 3.0) * 0.625 + (2.0 / 3.0) * 0.439453125;
        assert!((plan.retained_fraction(&dims) - expected).abs() < 1e-12);
    }

    #[test]
    fn bounds_enforced() {
        let dims = whisper_base();
        assert!(RankPlan::new(&dims, 60, 8, 10, 1).is_err());
        assert!(RankPlan::new(&dims, 8, 0, 500, 20).is_err());
        assert!(RankPlan::new(&dims, 4, 8, 10, 1).is_err());
        assert!(RankPlan::new(&dims, 64, 0, 512, 0).is_ok());
    }

    #[test]
    fn selected_plans() {
        let dims = whisper_base();
        let r = RankPlan::new(&dims, 32, 8, 162, 18).unwrap();
        // The identity plan is allowed.
        assert!(CompressionPlan::selected(&dims, r, false, &[]).unwrap().compressed_indices().is_empty());
        let p = CompressionPlan::selected(&dims, r, false, &[1, 3]).unwrap();
        assert_eq!(p.compressed_indices(), vec![1, 3]);
        assert!(CompressionPlan::selected(&dims, r, false, &[6]).is_err());
    }
}
