use serde::{Deserialize, Serialize};

use super::RankPlan;
use crate::error::{Error, Result};
use crate::model::ModelDims;

/// Geometry used to turn a target into ranks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanRules {
    /// Removed attention fraction divided by removed feed-forward fraction.
    pub attn_ff_ratio: f64,
    /// `r_a : l_a`. The attention total is rounded to a multiple of the sum.
    pub attn_split: (usize, usize),
    /// `r_f : l_f`. The feed-forward total is rounded to a multiple of the sum.
    pub ff_split: (usize, usize),
}

impl Default for PlanRules {
    fn default() -> Self {
        Self {
            attn_ff_ratio: 0.7,
            attn_split: (4, 1),
            ff_split: (9, 1),
        }
    }
}

fn round_to_multiple(x: f64, m: usize) -> usize {
    ((x / m as f64).round().max(0.0) as usize) * m
}

fn solve(dims: &ModelDims, target: f64, rules: &PlanRules) -> std::result::Result<RankPlan, String> {
    let a = dims.attention_params() as f64;
    let f = dims.ff_params() as f64;
    let removed_ff = target * (a + f) / (rules.attn_ff_ratio * a + f);
    let removed_attn = rules.attn_ff_ratio * removed_ff;
    let (d, dff) = (dims.d_model as f64, dims.d_ff as f64);
    let raw_a = (1.0 - removed_attn) * dims.d_head as f64;
    let raw_f = (1.0 - removed_ff) * d * dff / (d + dff);

    let (ra, la) = rules.attn_split;
    let (rf, lf) = rules.ff_split;
    let total_a = round_to_multiple(raw_a, ra + la);
    let total_f = round_to_multiple(raw_f, rf + lf);
    let plan = RankPlan {
        r_a: total_a / (ra + la) * ra,
        l_a: total_a / (ra + la) * la,
        r_f: total_f / (rf + lf) * rf,
        l_f: total_f / (rf + lf) * lf,
    };
    plan.validate(dims).map_err(|e| e.to_string())?;
    Ok(plan)
}

/// Smallest and largest feasible targets on a `1e-5` grid, if any.
pub fn feasible_target_range(dims: &ModelDims, rules: &PlanRules) -> Option<(f64, f64)> {
    const STEPS: usize = 100_000;
    let mut lo = None;
    let mut hi = None;
    for i in 1..STEPS {
        let t = i as f64 / STEPS as f64;
        if solve(dims, t, rules).is_ok() {
            lo.get_or_insert(t);
            hi = Some(t);
        }
    }
    lo.zip(hi)
}

/// [`make_plan_with`] under the default rules.
pub fn make_plan(dims: &ModelDims, target_removed_fraction: f64) -> Result<RankPlan> {
    make_plan_with(dims, target_removed_fraction, &PlanRules::default())
}

/// Ranks that remove roughly `target_removed_fraction` of the attention +
/// feed-forward weights, with the attention block losing `attn_ff_ratio`
/// times the fraction the feed-forward block loses.
pub fn make_plan_with(
    dims: &ModelDims,
    target_removed_fraction: f64,
    rules: &PlanRules,
) -> Result<RankPlan> {
    dims.validate()?;
    let t = target_removed_fraction;
    let split_ok = |(r, l): (usize, usize)| r >= l && r > 0;
    if !(rules.attn_ff_ratio > 0.0 && rules.attn_ff_ratio.is_finite())
        || !split_ok(rules.attn_split)
        || !split_ok(rules.ff_split)
    {
        return Err(Error::Plan(format!("invalid plan rules {rules:?}")));
    }
    let range = || match feasible_target_range(dims, rules) {
        Some((lo, hi)) => format!("feasible targets are about [{lo:.5}, {hi:.5}]"),
        None => "no target is feasible for these dimensions".to_string(),
    };
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Plan(format!(
            "target removed fraction {t} must lie in (0, 1); {}",
            range()
        )));
    }
    solve(dims, t, rules)
        .map_err(|why| Error::Plan(format!("target {t} is infeasible ({why}); {}", range())))
}
