//! Layer-wise fine-tuning of compressed layers against captured hidden states.
//!
//! Each compressed layer `T_θ′` is trained on its own to minimise the mean
//! over captured pairs of `‖T_θ′(X_i) − X_o‖_F²`, where `X_i, X_o` come from
//! the original model. No layer sees another layer's updates, so jobs run in
//! parallel and their results do not depend on scheduling.

mod adam;
mod gradcheck;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, GradCheckReport};
pub use crate::model::{HiddenStatePair, HiddenStatePairSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assemble::{CompressedSlot, MixedModel};
use crate::compress::{compress_layer, CompressionPlan, FactorInit, LayerPlan, RankPlan};
use crate::error::{Error, Result};
use crate::model::{
    backward_from_cache, forward_cached, layer_forward, CompressedLayerParams, LayerParams,
    LayerWeights, Model, ModelConfig, ParamClass,
};
use crate::quant::{fake_quantize_layer, QuantLevel, QuantizedLayer};

/// Which parameters start where and which ones train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// (i) SVD-initialised spectral factors and LoRA, all trained.
    #[default]
    SpectralLora,
    /// (ii) Spectral factors only; the LoRA budget becomes extra spectral rank.
    SpectralOnly,
    /// (iii) Factors of the same total width from random init, all trained.
    Scratch,
    /// (iv) Spectral factors frozen; LoRA, biases and norms train.
    FrozenSpectral,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [
        TrainMode::SpectralLora,
        TrainMode::SpectralOnly,
        TrainMode::Scratch,
        TrainMode::FrozenSpectral,
    ];

    /// Roman-numeral label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            TrainMode::SpectralLora => "i",
            TrainMode::SpectralOnly => "ii",
            TrainMode::Scratch => "iii",
            TrainMode::FrozenSpectral => "iv",
        }
    }

    /// The ranks the layer is actually built with.
    pub fn effective_plan(self, plan: &RankPlan) -> RankPlan {
        match self {
            TrainMode::SpectralOnly => RankPlan {
                r_a: plan.r_a + plan.l_a,
                l_a: 0,
                r_f: plan.r_f + plan.l_f,
                l_f: 0,
            },
            _ => *plan,
        }
    }

    pub fn init(self) -> FactorInit {
        match self {
            TrainMode::Scratch => FactorInit::Scratch,
            _ => FactorInit::Spectral,
        }
    }

    pub fn trains(self, class: ParamClass) -> bool {
        !(self == TrainMode::FrozenSpectral && class == ParamClass::Spectral)
    }
}

/// Fine-tuning settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(flatten)]
    pub adam: AdamConfig,
    pub mode: TrainMode,
    pub seed: u64,
    /// Fake-quantize weights in the forward pass (straight-through backward).
    pub quantize: QuantLevel,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            adam: AdamConfig::default(),
            mode: TrainMode::SpectralLora,
            seed: 0,
            quantize: QuantLevel::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        let ok = self.epochs >= 1
            && self.batch_size >= 1
            && a.learning_rate > 0.0
            && a.learning_rate.is_finite()
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }
}

/// Loss trajectory of one layer's fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub layer_index: usize,
    pub mode: TrainMode,
    /// Objective before training followed by one value per epoch.
    pub losses: Vec<f64>,
    /// Index into `losses` of the returned iterate.
    pub best_epoch: usize,
    pub steps: u64,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    /// Objective of the returned parameters.
    pub fn final_loss(&self) -> f64 {
        self.losses[self.best_epoch]
    }
}

fn check_pairs(cfg: &ModelConfig, pairs: &HiddenStatePairSet) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Input("no hidden-state pairs to train on".into()));
    }
    if pairs.d_model != cfg.dims.d_model {
        return Err(Error::shape(format!(
            "pairs have width {}, model has {}",
            pairs.d_model, cfg.dims.d_model
        )));
    }
    Ok(())
}

fn sq_error(y: &crate::linalg::DenseMatrix, target: &crate::linalg::DenseMatrix) -> f64 {
    y.data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// Mean over pairs of `‖layer(X_i) − X_o‖_F²`.
pub fn layer_objective<L: AsRef<LayerWeights> + ?Sized>(
    layer: &L,
    cfg: &ModelConfig,
    pairs: &HiddenStatePairSet,
) -> Result<f64> {
    check_pairs(cfg, pairs)?;
    let w = layer.as_ref();
    let errs: Vec<f64> = pairs
        .pairs
        .par_iter()
        .map(|p| layer_forward(w, cfg, &p.x_i, None, false).map(|(y, _)| sq_error(&y, &p.x_o)))
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / pairs.len() as f64)
}

/// Gradient of the mean squared error over `batch` (in the order given).
fn batch_gradient(
    w: &LayerWeights,
    cfg: &ModelConfig,
    pairs: &HiddenStatePairSet,
    batch: &[usize],
) -> Result<Vec<f64>> {
    let scale = 2.0 / batch.len() as f64;
    let per_sample: Vec<Vec<f64>> = batch
        .par_iter()
        .map(|&k| -> Result<Vec<f64>> {
            let p = &pairs.pairs[k];
            let cache = forward_cached(w, cfg, &p.x_i, None)?;
            let mut up = cache.out.sub(&p.x_o)?;
            up = up.scale(scale);
            let mut g = w.zeros_like();
            backward_from_cache(w, &mut g, cfg, &cache, &up);
            Ok(g.flatten())
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; per_sample[0].len()];
    for g in &per_sample {
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
    }
    Ok(total)
}

fn view(w: &LayerWeights, level: QuantLevel) -> std::borrow::Cow<'_, LayerWeights> {
    match level {
        QuantLevel::None => std::borrow::Cow::Borrowed(w),
        QuantLevel::Int8 => std::borrow::Cow::Owned(fake_quantize_layer(w)),
    }
}

/// Core trainer on raw layer weights. Returns the best iterate (latent,
/// unquantized weights) and its report. Losses are measured on the weights
/// the forward pass sees, i.e. quantized ones under `QuantLevel::Int8`.
pub(crate) fn train_weights(
    weights: LayerWeights,
    cfg: &ModelConfig,
    pairs: &HiddenStatePairSet,
    train: &TrainConfig,
) -> Result<(LayerWeights, TrainReport)> {
    train.validate()?;
    check_pairs(cfg, pairs)?;
    weights.validate(cfg)?;
    let layer_index = pairs.layer_index;
    let mask: Vec<bool> = weights
        .class_vector()
        .into_iter()
        .map(|c| train.mode.trains(c))
        .collect();

    let mut current = weights;
    let mut flat = current.flatten();
    let mut adam = Adam::new(train.adam, flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    rng.set_stream(2 * layer_index as u64 + 1);

    let initial = layer_objective(view(&current, train.quantize).as_ref(), cfg, pairs)?;
    if !initial.is_finite() {
        return Err(Error::Training {
            layer: Some(layer_index),
            epoch: 0,
            detail: "initial objective is not finite".into(),
        });
    }
    let mut losses = vec![initial];
    let mut best = (initial, 0usize, current.clone());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let diverged = |epoch: usize, detail: String| Error::Training {
        layer: Some(layer_index),
        epoch,
        detail,
    };

    for epoch in 1..=train.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(train.batch_size) {
            let seen = view(&current, train.quantize);
            let grads = batch_gradient(seen.as_ref(), cfg, pairs, batch)
                .map_err(|e| diverged(epoch, e.to_string()))?;
            drop(seen);
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(diverged(epoch, "non-finite gradient".into()));
            }
            adam.step(&mut flat, &grads, &mask);
            current.load_flat(&flat);
        }
        let loss = layer_objective(view(&current, train.quantize).as_ref(), cfg, pairs)
            .map_err(|e| diverged(epoch, e.to_string()))?;
        if !loss.is_finite() {
            return Err(diverged(epoch, format!("objective became {loss}")));
        }
        losses.push(loss);
        if loss < best.0 {
            best = (loss, epoch, current.clone());
        }
    }
    let report = TrainReport {
        layer_index,
        mode: train.mode,
        losses,
        best_epoch: best.1,
        steps: adam.steps() as u64,
    };
    Ok((best.2, report))
}

/// Mini-batch Adam on [`layer_objective`]; returns the best-loss iterate.
pub fn finetune_layer(
    layer: CompressedLayerParams,
    cfg: &ModelConfig,
    pairs: &HiddenStatePairSet,
    train: &TrainConfig,
) -> Result<(CompressedLayerParams, TrainReport)> {
    let plan = *layer.plan();
    let (w, report) = train_weights(layer.into_weights(), cfg, pairs, train)?;
    Ok((CompressedLayerParams::new(w, plan, cfg)?, report))
}

/// RNG that seeds the factor initialisation of layer `index`.
pub fn init_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * index as u64);
    rng
}

/// Compresses an original layer the way `train.mode` prescribes.
pub fn prepare_layer(
    original: &LayerParams,
    cfg: &ModelConfig,
    plan: &RankPlan,
    train: &TrainConfig,
    index: usize,
) -> Result<CompressedLayerParams> {
    let effective = train.mode.effective_plan(plan);
    compress_layer(original, cfg, &effective, train.mode.init(), &mut init_rng(train.seed, index))
}

/// How layer jobs are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    /// One layer after another on the calling thread.
    Sequential,
    /// Rayon's global pool.
    #[default]
    Parallel,
    /// A dedicated pool with this many workers.
    Workers(usize),
}

/// Result of one layer job.
#[derive(Debug, Clone)]
pub struct LayerJob {
    pub slot: CompressedSlot,
    pub report: TrainReport,
}

fn run_job(
    model: &Model,
    index: usize,
    ranks: &RankPlan,
    quantize: bool,
    pairs: &HiddenStatePairSet,
    train: &TrainConfig,
) -> Result<LayerJob> {
    let cfg = &model.config;
    let at = |e: Error| match e {
        Error::Training { .. } => e,
        other => Error::Training {
            layer: Some(index),
            epoch: 0,
            detail: other.to_string(),
        },
    };
    let layer = prepare_layer(&model.layers[index], cfg, ranks, train, index).map_err(at)?;
    let mut t = *train;
    if quantize {
        t.quantize = QuantLevel::Int8;
        let plan = *layer.plan();
        let (w, report) = train_weights(layer.into_weights(), cfg, pairs, &t)?;
        let trained = CompressedLayerParams::new(w, plan, cfg)?;
        let q = QuantizedLayer::from_layer(&trained, cfg)?;
        Ok(LayerJob {
            slot: CompressedSlot::Quantized(q),
            report,
        })
    } else {
        t.quantize = QuantLevel::None;
        let (trained, report) = finetune_layer(layer, cfg, pairs, &t)?;
        Ok(LayerJob {
            slot: CompressedSlot::Full(trained),
            report,
        })
    }
}

/// Compresses and fine-tunes every layer the plan selects, each against
/// pairs captured from the original model, and assembles the result with
/// the compressed slots active.
///
/// `pairs` must hold one set per model layer (index `j` for layer `j`).
pub fn finetune_all_layers(
    model: &Model,
    plan: &CompressionPlan,
    pairs: &[HiddenStatePairSet],
    train: &TrainConfig,
    schedule: Schedule,
) -> Result<(MixedModel, Vec<TrainReport>)> {
    let dims = &model.config.dims;
    if plan.layers.len() != dims.n_layers {
        return Err(Error::Plan(format!(
            "plan covers {} layers, model has {}",
            plan.layers.len(),
            dims.n_layers
        )));
    }
    train.validate()?;
    let jobs: Vec<(usize, RankPlan, bool)> = plan
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            LayerPlan::Compress { ranks, quantize } => Some((i, *ranks, *quantize)),
            LayerPlan::Keep => None,
        })
        .collect();
    for (i, ranks, _) in &jobs {
        ranks.validate(dims)?;
        match pairs.get(*i) {
            Some(p) if p.layer_index == *i => {}
            _ => {
                return Err(Error::Input(format!("no captured pairs for layer {i}")));
            }
        }
    }

    let run = |&(i, ranks, q): &(usize, RankPlan, bool)| run_job(model, i, &ranks, q, &pairs[i], train);
    let results: Vec<LayerJob> = match schedule {
        Schedule::Sequential => jobs.iter().map(run).collect::<Result<_>>()?,
        Schedule::Parallel => jobs.par_iter().map(run).collect::<Result<_>>()?,
        Schedule::Workers(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
            pool.install(|| jobs.par_iter().map(run).collect::<Result<_>>())?
        }
    };

    let mut mixed = MixedModel::from_model(model.clone());
    let mut reports = Vec::with_capacity(results.len());
    for ((i, _, _), job) in jobs.iter().zip(results) {
        mixed = mixed.with_compressed(*i, job.slot)?;
        reports.push(job.report);
    }
    Ok((mixed, reports))
}

#[cfg(test)]
mod tests;
