use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::{purpose_rng, sample_inputs, token_error_rate, InputDistribution, Task};
use super::{RunConfig, SweepOrderKind};
use crate::assemble::{
    all_logits, argmax_agreement, relative_divergence, sweep, CompressedSlot, MixedModel, SweepOrder, SweepPoint,
};
use crate::compress::{CompressionPlan, LayerPlan, RankPlan, SizeReport};
use crate::error::{Error, Result};
use crate::finetune::{finetune_all_layers, layer_objective, prepare_layer, TrainConfig, TrainMode, TrainReport};
use crate::model::{capture_all_layers, HiddenStatePairSet, LayerStack, Model, ModelDims};
use crate::quant::QuantizedLayer;

const CAPTURE_STREAM: u64 = 3;
const EVAL_NARROW_STREAM: u64 = 4;
const EVAL_BROAD_STREAM: u64 = 5;

/// Captures `{X_i, X_o}` for every layer on narrow-distribution inputs.
pub fn capture_pairs(model: &Model, cfg: &RunConfig, source_hash: &str) -> Result<Vec<HiddenStatePairSet>> {
    let inputs = sample_inputs(
        &cfg.data,
        model.config.dims.vocab,
        InputDistribution::Narrow,
        cfg.data.capture_samples,
        &mut purpose_rng(cfg.seed, CAPTURE_STREAM),
    );
    let mut sets = capture_all_layers(model, &inputs)?;
    for s in &mut sets {
        s.source_hash = source_hash.to_string();
        s.distribution = InputDistribution::Narrow.label().to_string();
    }
    Ok(sets)
}

/// Evaluation inputs; disjoint RNG streams from capture.
pub fn eval_inputs(cfg: &RunConfig, vocab: usize, dist: InputDistribution) -> Vec<Vec<usize>> {
    let stream = match dist {
        InputDistribution::Narrow => EVAL_NARROW_STREAM,
        InputDistribution::Broad => EVAL_BROAD_STREAM,
    };
    sample_inputs(&cfg.data, vocab, dist, cfg.data.eval_samples, &mut purpose_rng(cfg.seed, stream))
}

/// Compressed model at the fine-tuning starting point: the exact
/// initialisation `finetune_all_layers` would train from, with
/// quantize-flagged layers quantized once.
pub fn compress_svd_only(model: &Model, plan: &CompressionPlan, train: &TrainConfig) -> Result<MixedModel> {
    plan.validate(&model.config.dims)?;
    let mut mixed = MixedModel::from_model(model.clone());
    for (i, l) in plan.layers.iter().enumerate() {
        if let LayerPlan::Compress { ranks, quantize } = l {
            let c = prepare_layer(&model.layers[i], &model.config, ranks, train, i)?;
            let slot = if *quantize {
                CompressedSlot::Quantized(QuantizedLayer::from_layer(&c, &model.config)?)
            } else {
                CompressedSlot::Full(c)
            };
            mixed = mixed.with_compressed(i, slot)?;
        }
    }
    Ok(mixed)
}

/// Post-training quantization of every full-precision compressed slot.
pub fn quantize_slots(mixed: &MixedModel) -> Result<MixedModel> {
    let cfg = *mixed.config();
    let mut out = mixed.clone();
    for i in 0..mixed.layer_count() {
        if let Some(CompressedSlot::Full(c)) = mixed.compressed(i) {
            let active = mixed.active()[i];
            out = out.with_compressed(i, CompressedSlot::Quantized(QuantizedLayer::from_layer(c, &cfg)?))?;
            out.set_active(i, active)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerObjective {
    pub layer: usize,
    pub objective: f64,
}

/// Layer objective of every compressed slot against its captured pairs.
pub fn layer_objectives(mixed: &MixedModel, pairs: &[HiddenStatePairSet]) -> Result<Vec<LayerObjective>> {
    let cfg = mixed.config();
    let mut out = Vec::new();
    for i in 0..mixed.layer_count() {
        if let Some(slot) = mixed.compressed(i) {
            let set = pairs
                .get(i)
                .filter(|p| p.layer_index == i)
                .ok_or_else(|| Error::Input(format!("no captured pairs for layer {i}")))?;
            out.push(LayerObjective {
                layer: i,
                objective: layer_objective(slot.layer(), cfg, set)?,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionEval {
    pub distribution: InputDistribution,
    /// `‖L′ − L‖_F / ‖L‖_F` against the source model.
    pub divergence: f64,
    pub agreement: f64,
    /// Against task targets, when the source model was trained on a task.
    pub token_error_rate: Option<f64>,
    pub source_token_error_rate: Option<f64>,
}

pub fn evaluate_on(
    source: &Model,
    candidate: &MixedModel,
    inputs: &[Vec<usize>],
    dist: InputDistribution,
    task: Option<Task>,
) -> Result<DistributionEval> {
    let reference = all_logits(source, inputs)?;
    let logits = all_logits(candidate, inputs)?;
    Ok(DistributionEval {
        distribution: dist,
        divergence: relative_divergence(&reference, &logits),
        agreement: argmax_agreement(&reference, &logits),
        token_error_rate: task.map(|t| token_error_rate(t, inputs, &logits)),
        source_token_error_rate: task.map(|t| token_error_rate(t, inputs, &reference)),
    })
}

/// [`evaluate_on`] over the narrow and broad evaluation sets.
pub fn evaluate(source: &Model, candidate: &MixedModel, cfg: &RunConfig, task: Option<Task>) -> Result<Vec<DistributionEval>> {
    [InputDistribution::Narrow, InputDistribution::Broad]
        .into_iter()
        .map(|d| evaluate_on(source, candidate, &eval_inputs(cfg, source.config.dims.vocab, d), d, task))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountingSummary {
    pub original_params: usize,
    pub params: usize,
    pub retained_fraction: f64,
    pub removed_fraction: f64,
    pub original_bytes_f32: usize,
    pub bytes: usize,
    pub byte_fraction: f64,
    pub nominal_byte_fraction: f64,
}

impl From<&SizeReport> for AccountingSummary {
    fn from(s: &SizeReport) -> Self {
        Self {
            original_params: s.original_params(),
            params: s.params(),
            retained_fraction: s.retained_fraction(),
            removed_fraction: s.removed_fraction(),
            original_bytes_f32: s.original_bytes_f32(),
            bytes: s.bytes(),
            byte_fraction: s.byte_fraction(),
            nominal_byte_fraction: s.nominal_byte_fraction(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunProvenance {
    pub config_hash: String,
    pub source_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Outcome of a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub provenance: RunProvenance,
    pub plan: CompressionPlan,
    pub mode: TrainMode,
    /// Objective at the SVD initialisation, per compressed layer.
    pub svd_only_objectives: Vec<LayerObjective>,
    pub finetuned_objectives: Vec<LayerObjective>,
    pub svd_only: Vec<DistributionEval>,
    pub finetuned: Vec<DistributionEval>,
    pub accounting: AccountingSummary,
    pub loss_histories: Vec<TrainReport>,
    /// Wall-clock per stage; informational only.
    pub timings: Vec<StageTiming>,
}

impl EvalReport {
    /// All metrics finite, divergences non-negative, agreement in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        let objectives = self.svd_only_objectives.iter().chain(&self.finetuned_objectives);
        for o in objectives {
            if !(o.objective.is_finite() && o.objective >= 0.0) {
                return Err(Error::numerical("eval report", format!("layer {} objective {}", o.layer, o.objective)));
            }
        }
        for e in self.svd_only.iter().chain(&self.finetuned) {
            let ter_ok = e.token_error_rate.is_none_or(f64::is_finite);
            if !(e.divergence.is_finite() && e.divergence >= 0.0 && (0.0..=1.0).contains(&e.agreement) && ter_ok) {
                return Err(Error::numerical("eval report", format!("bad metrics {e:?}")));
            }
        }
        Ok(())
    }

    /// Plain-text summary tables.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed {}  config {}", self.provenance.seed, short(&self.provenance.config_hash));
        let _ = writeln!(s, "source {}", short(&self.provenance.source_hash));
        let a = &self.accounting;
        let _ = writeln!(
            s,
            "retained {:.4}  removed {:.4}  bytes {:.4} (nominal {:.4})",
            a.retained_fraction, a.removed_fraction, a.byte_fraction, a.nominal_byte_fraction
        );
        let _ = writeln!(s, "\nlayer  svd-only objective  fine-tuned objective");
        for (b, f) in self.svd_only_objectives.iter().zip(&self.finetuned_objectives) {
            let _ = writeln!(s, "{:>5}  {:>18.6e}  {:>20.6e}", b.layer, b.objective, f.objective);
        }
        let _ = writeln!(s, "\nmodel       dist    divergence  agreement  TER");
        for (label, evals) in [("svd-only", &self.svd_only), ("fine-tuned", &self.finetuned)] {
            for e in evals.iter() {
                let ter = e.token_error_rate.map_or("-".to_string(), |t| format!("{t:.4}"));
                let _ = writeln!(
                    s,
                    "{label:<10}  {:<6}  {:>10.6}  {:>9.4}  {ter}",
                    e.distribution.label(),
                    e.divergence,
                    e.agreement
                );
            }
        }
        if !self.timings.is_empty() {
            let _ = writeln!(s, "\nstage         seconds");
            for t in &self.timings {
                let _ = writeln!(s, "{:<12}  {:>7.2}", t.stage, t.seconds);
            }
        }
        s
    }
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

/// Artifacts of an in-memory pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub pairs: Vec<HiddenStatePairSet>,
    pub svd_only: MixedModel,
    pub finetuned: MixedModel,
    pub report: EvalReport,
}

struct Timer(Vec<StageTiming>);

impl Timer {
    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage));
        self.0.push(StageTiming {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }
}

/// Everything [`eval_report`] reads.
pub struct EvalInputs<'a> {
    pub cfg: &'a RunConfig,
    pub source: &'a Model,
    pub source_hash: &'a str,
    pub pairs: &'a [HiddenStatePairSet],
    pub plan: &'a CompressionPlan,
    pub svd_only: &'a MixedModel,
    pub finetuned: &'a MixedModel,
    pub histories: Vec<TrainReport>,
    pub task: Option<Task>,
}

/// Per-layer objectives and narrow/broad metrics of the SVD-only and
/// fine-tuned models. Timings are left empty.
pub fn eval_report(x: EvalInputs<'_>) -> Result<EvalReport> {
    let report = EvalReport {
        provenance: RunProvenance {
            config_hash: x.cfg.config_hash(),
            source_hash: x.source_hash.to_string(),
            seed: x.cfg.seed,
        },
        plan: x.plan.clone(),
        mode: x.cfg.train.mode,
        svd_only_objectives: layer_objectives(x.svd_only, x.pairs)?,
        finetuned_objectives: layer_objectives(x.finetuned, x.pairs)?,
        svd_only: evaluate(x.source, x.svd_only, x.cfg, x.task)?,
        finetuned: evaluate(x.source, x.finetuned, x.cfg, x.task)?,
        accounting: AccountingSummary::from(&x.finetuned.size_report()),
        loss_histories: x.histories,
        timings: Vec::new(),
    };
    report.validate()?;
    Ok(report)
}

/// capture → plan → compress → fine-tune → assemble → evaluate, in memory.
/// Capture uses narrow inputs; evaluation covers narrow and broad.
pub fn run_pipeline(cfg: &RunConfig, source: &Model, source_hash: &str, task: Option<Task>) -> Result<PipelineOutcome> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    if cfg.model_config().map_err(|e| e.in_stage("config"))? != source.config {
        return Err(Error::Config("source checkpoint does not match the configured model".into()).in_stage("config"));
    }
    let mut t = Timer(Vec::new());
    let pairs = t.run("capture", || capture_pairs(source, cfg, source_hash))?;
    let plan = t.run("plan", || cfg.compression_plan())?;
    let train = cfg.train_config();
    let svd_only = t.run("compress", || compress_svd_only(source, &plan, &train))?;
    let (finetuned, histories) =
        t.run("finetune", || finetune_all_layers(source, &plan, &pairs, &train, cfg.schedule()))?;
    let provenance = crate::assemble::Provenance {
        source_hash: source_hash.to_string(),
        plan: Some(plan.clone()),
        seed: Some(cfg.seed),
        config_hash: cfg.config_hash(),
        task,
    };
    let (svd_only, finetuned) = t.run("assemble", || {
        let mut a = svd_only;
        let mut b = finetuned;
        a.provenance = provenance.clone();
        b.provenance = provenance.clone();
        Ok((a, b))
    })?;
    let mut report = t.run("eval", || {
        eval_report(EvalInputs {
            cfg,
            source,
            source_hash,
            pairs: &pairs,
            plan: &plan,
            svd_only: &svd_only,
            finetuned: &finetuned,
            histories,
            task,
        })
    })?;
    report.timings = t.0;
    Ok(PipelineOutcome {
        pairs,
        svd_only,
        finetuned,
        report,
    })
}

/// Ranks keeping about `fraction` of each block's rank capacity, with the
/// default 4:1 (attention) and 9:1 (feed-forward) spectral:LoRA splits.
pub fn rank_sweep_plan(dims: &ModelDims, fraction: f64) -> Result<RankPlan> {
    let full = RankPlan::full_rank(dims);
    let width = |cap: usize| ((fraction * cap as f64).round() as usize).clamp(1, cap);
    let wa = width(full.attention_width());
    let wf = width(full.ff_width());
    RankPlan::new(dims, wa - wa / 5, wa / 5, wf - wf / 10, wf / 10)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSweepPoint {
    pub fraction: f64,
    pub ranks: RankPlan,
    pub quantized: bool,
    pub removed_fraction: f64,
    pub byte_fraction: f64,
    pub divergence: f64,
    pub agreement: f64,
}

/// Every layer compressed at each configured fraction and fine-tuned, with
/// and (optionally) without int8 quantization. Metrics on narrow inputs.
pub fn rank_sweep(source: &Model, pairs: &[HiddenStatePairSet], cfg: &RunConfig) -> Result<Vec<RankSweepPoint>> {
    let dims = source.config.dims;
    let mut train = cfg.train_config();
    if let Some(e) = cfg.sweep.epochs {
        train.epochs = e;
    }
    let inputs = eval_inputs(cfg, dims.vocab, InputDistribution::Narrow);
    let reference = all_logits(source, &inputs)?;
    let quant_options: &[bool] = if cfg.sweep.quantized { &[false, true] } else { &[false] };
    let mut points = Vec::new();
    for &fraction in &cfg.sweep.fractions {
        let ranks = rank_sweep_plan(&dims, fraction)?;
        for &quantized in quant_options {
            let plan = CompressionPlan::uniform(&dims, ranks, quantized)?;
            let (mixed, _) = finetune_all_layers(source, &plan, pairs, &train, cfg.schedule())?;
            let logits = all_logits(&mixed, &inputs)?;
            let size = mixed.size_report();
            points.push(RankSweepPoint {
                fraction,
                ranks,
                quantized,
                removed_fraction: size.removed_fraction(),
                byte_fraction: size.byte_fraction(),
                divergence: relative_divergence(&reference, &logits),
                agreement: argmax_agreement(&reference, &logits),
            });
        }
    }
    Ok(points)
}

/// Layers switched to compressed one at a time (first to last, or lowest
/// objective first), on narrow inputs.
pub fn successive_sweep(mixed: &MixedModel, pairs: &[HiddenStatePairSet], cfg: &RunConfig) -> Result<Vec<SweepPoint>> {
    let mut order: Vec<usize> = (0..mixed.layer_count()).filter(|&i| mixed.compressed(i).is_some()).collect();
    if cfg.sweep.order == SweepOrderKind::ByObjective {
        let obj = layer_objectives(mixed, pairs)?;
        let mut ranked: Vec<(f64, usize)> = obj.iter().map(|o| (o.objective, o.layer)).collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order = ranked.into_iter().map(|(_, i)| i).collect();
    }
    let inputs = eval_inputs(cfg, mixed.config().dims.vocab, InputDistribution::Narrow);
    sweep(mixed, &SweepOrder::Explicit(order), &inputs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub provenance: RunProvenance,
    pub successive: Vec<SweepPoint>,
    pub ranks: Vec<RankSweepPoint>,
}

impl SweepReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "layers compressed  removed  bytes   divergence  agreement");
        for p in &self.successive {
            let _ = writeln!(
                s,
                "{:<17}  {:>7.4}  {:>6.4}  {:>10.6}  {:>9.4}",
                format!("{:?}", p.compressed_layers),
                p.removed_fraction,
                p.byte_fraction,
                p.divergence,
                p.agreement
            );
        }
        if !self.ranks.is_empty() {
            let _ = writeln!(s, "\nfraction  ranks (r_a,l_a,r_f,l_f)  int8  removed  bytes   divergence  agreement");
            for p in &self.ranks {
                let r = p.ranks;
                let _ = writeln!(
                    s,
                    "{:>8.3}  {:<23}  {:<4}  {:>7.4}  {:>6.4}  {:>10.6}  {:>9.4}",
                    p.fraction,
                    format!("({},{},{},{})", r.r_a, r.l_a, r.r_f, r.l_f),
                    if p.quantized { "yes" } else { "no" },
                    p.removed_fraction,
                    p.byte_fraction,
                    p.divergence,
                    p.agreement
                );
            }
        }
        s
    }
}
