use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{batch_gradient, layer_objective, HiddenStatePairSet};
use crate::error::Result;
use crate::model::{LayerWeights, ModelConfig, ParamClass};

/// Denominator floor of the relative error, so entries whose true gradient
/// is zero are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

/// Outcome of comparing analytic and finite-difference gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    /// Largest relative error per parameter class.
    pub per_class: BTreeMap<ParamClass, f64>,
    pub max_rel_error: f64,
    pub entries_checked: usize,
    /// Euclidean norm of the analytic gradient.
    pub analytic_norm: f64,
    pub passed: bool,
}

/// Checks the analytic gradient of [`layer_objective`] against central
/// differences with the given `step`, for every entry of every tensor.
pub fn grad_check<L: AsRef<LayerWeights> + ?Sized>(
    layer: &L,
    cfg: &ModelConfig,
    pairs: &HiddenStatePairSet,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let w = layer.as_ref();
    let all: Vec<usize> = (0..pairs.len()).collect();
    // The batch gradient is of the mean squared error over `all`, which is
    // exactly the objective.
    let analytic = batch_gradient(w, cfg, pairs, &all)?;
    let classes = w.class_vector();
    let base = w.flatten();
    let mut probe = w.clone();
    let mut per_class: BTreeMap<ParamClass, f64> = BTreeMap::new();
    let mut max_rel_error = 0.0f64;
    for k in 0..base.len() {
        let mut p = base.clone();
        p[k] = base[k] + step;
        probe.load_flat(&p);
        let plus = layer_objective(&probe, cfg, pairs)?;
        p[k] = base[k] - step;
        probe.load_flat(&p);
        let minus = layer_objective(&probe, cfg, pairs)?;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[k];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        let e = per_class.entry(classes[k]).or_insert(0.0);
        *e = e.max(rel);
        max_rel_error = max_rel_error.max(rel);
    }
    Ok(GradCheckReport {
        step,
        tolerance,
        per_class,
        max_rel_error,
        entries_checked: base.len(),
        analytic_norm: analytic.iter().map(|g| g * g).sum::<f64>().sqrt(),
        passed: max_rel_error < tolerance,
    })
}
