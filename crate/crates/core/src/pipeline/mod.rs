//! End-to-end runs on toy checkpoints: configuration, synthetic data,
//! toy-model generation and training, and the staged compression pipeline.

mod data;
mod run;
mod toy;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compress::{make_plan, CompressionPlan, RankPlan};
use crate::error::{Error, Result};
use crate::finetune::{AdamConfig, Schedule, TrainConfig, TrainMode};
use crate::model::{Activation, ModelConfig, ModelDims};
use crate::quant::QuantLevel;

pub use data::{
    edit_distance, purpose_rng, sample_inputs, sample_sequence, token_accuracy, token_error_rate, DataSection,
    InputDistribution, Task,
};
pub use run::{
    capture_pairs, compress_svd_only, eval_inputs, eval_report, evaluate, evaluate_on, layer_objectives, quantize_slots, rank_sweep,
    rank_sweep_plan, run_pipeline, successive_sweep, AccountingSummary, DistributionEval, EvalInputs, EvalReport,
    LayerObjective, PipelineOutcome, RankSweepPoint, RunProvenance, StageTiming, SweepReport,
};
pub use toy::{gen_toy, train_toy, ToyTrainReport};

/// Toy transformer geometry and architecture switches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub vocab: usize,
    pub activation: Activation,
    pub pre_ln: bool,
    pub causal: bool,
    /// Give the generated model non-zero biases.
    pub biases: bool,
    /// Power-law exponent imposed on generated weight spectra; 0 keeps
    /// plain Gaussian weights.
    pub spectral_decay: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_head: 16,
            d_ff: 256,
            n_layers: 4,
            vocab: 16,
            activation: Activation::Gelu,
            pre_ln: false,
            causal: false,
            biases: true,
            spectral_decay: 1.0,
        }
    }
}

impl ModelSection {
    pub fn config(&self) -> Result<ModelConfig> {
        let dims = ModelDims::new(self.d_model, self.n_heads, self.d_head, self.d_ff, self.n_layers, self.vocab)?;
        if !(self.spectral_decay >= 0.0 && self.spectral_decay.is_finite()) {
            return Err(Error::Config(format!("spectral_decay {} must be finite and ≥ 0", self.spectral_decay)));
        }
        if self.vocab < 2 {
            return Err(Error::Config("vocab must hold at least two tokens".into()));
        }
        Ok(ModelConfig {
            dims,
            activation: self.activation,
            ff_residual_pre_ln: self.pre_ln,
            causal: self.causal,
        })
    }
}

/// Either a target removed fraction or explicit ranks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSection {
    /// Fraction of attention + feed-forward weights to remove. Defaults to
    /// 0.5 when `ranks` is unset too.
    pub target: Option<f64>,
    pub ranks: Option<RankPlan>,
    /// Layers to compress; all when unset.
    pub layers: Option<Vec<usize>>,
    /// Quantization-aware fine-tuning and int8 export of compressed layers.
    pub quantize: bool,
}

impl PlanSection {
    pub fn ranks(&self, dims: &ModelDims) -> Result<RankPlan> {
        match (self.target, self.ranks) {
            (Some(_), Some(_)) => Err(Error::Config("set either plan.target or plan.ranks, not both".into())),
            (None, Some(r)) => {
                r.validate(dims)?;
                Ok(r)
            }
            (t, None) => make_plan(dims, t.unwrap_or(0.5)),
        }
    }

    pub fn build(&self, dims: &ModelDims) -> Result<CompressionPlan> {
        let ranks = self.ranks(dims)?;
        match &self.layers {
            None => CompressionPlan::uniform(dims, ranks, self.quantize),
            Some(idx) => CompressionPlan::selected(dims, ranks, self.quantize, idx),
        }
    }
}

/// Fine-tuning settings; the seed comes from the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub mode: TrainMode,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.adam.learning_rate,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            epsilon: t.adam.epsilon,
            mode: t.mode,
        }
    }
}

impl TrainSection {
    pub fn config(&self, seed: u64, quantize: bool) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
            },
            mode: self.mode,
            seed,
            quantize: if quantize { QuantLevel::Int8 } else { QuantLevel::None },
        }
    }
}

/// End-to-end training of the toy model on a synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySection {
    pub task: Task,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Held-out sequences for the reported accuracy.
    pub holdout: usize,
}

impl Default for ToySection {
    fn default() -> Self {
        Self {
            task: Task::Copy,
            steps: 2000,
            batch_size: 16,
            learning_rate: 3e-3,
            holdout: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepOrderKind {
    #[default]
    Successive,
    /// Lowest per-layer objective first.
    ByObjective,
}

/// Compression sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub order: SweepOrderKind,
    /// Retained fractions of each block's rank capacity for the rank sweep.
    pub fractions: Vec<f64>,
    /// Fine-tuning epochs per rank-sweep point; the train section's when unset.
    pub epochs: Option<usize>,
    /// Also run every rank-sweep point with int8 quantization.
    pub quantized: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            order: SweepOrderKind::Successive,
            fractions: vec![0.25, 0.5, 0.75],
            epochs: None,
            quantized: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Where stage artifacts and reports go.
    pub out_dir: PathBuf,
    /// Source checkpoint; `<out_dir>/source.adpt` when unset.
    pub source: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("adaptwin-run"),
            source: None,
        }
    }
}

/// Everything a run needs. Parsed from TOML; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Fine-tuning worker threads; rayon's default pool when unset.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub plan: PlanSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub toy: ToySection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub paths: PathsSection,
}

impl RunConfig {
    /// Default toy run with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            workers: None,
            model: ModelSection::default(),
            data: DataSection::default(),
            plan: PlanSection::default(),
            train: TrainSection::default(),
            toy: ToySection::default(),
            sweep: SweepSection::default(),
            paths: PathsSection::default(),
        }
    }

    /// Parses TOML, applies `key.path = value` overrides, then validates.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut value: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (key, raw) in overrides {
            set_path(&mut value, key, parse_override(raw))?;
        }
        let cfg: RunConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Checks every section, including the plan's rank bounds, before any
    /// compute starts.
    pub fn validate(&self) -> Result<()> {
        let cfg = self.model.config()?;
        self.data.validate(cfg.dims.vocab)?;
        self.plan.build(&cfg.dims)?;
        self.train_config().validate()?;
        if self.toy.batch_size == 0 || !(self.toy.learning_rate > 0.0 && self.toy.learning_rate.is_finite()) {
            return Err(Error::Config(format!("invalid toy training settings {:?}", self.toy)));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if let Some(f) = self.sweep.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(Error::Config(format!("sweep fraction {f} must lie in (0, 1]")));
        }
        if self.sweep.epochs == Some(0) {
            return Err(Error::Config("sweep.epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.config()
    }

    pub fn compression_plan(&self) -> Result<CompressionPlan> {
        self.plan.build(&self.model.config()?.dims)
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.config(self.seed, false)
    }

    pub fn schedule(&self) -> Schedule {
        match self.workers {
            None => Schedule::Parallel,
            Some(1) => Schedule::Sequential,
            Some(n) => Schedule::Workers(n),
        }
    }

    /// SHA-256 of everything except paths, so relocating a run keeps its hash.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsSection::default();
        let bytes = serde_json::to_vec(&c).expect("run config serializes");
        Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_override(raw: &str) -> toml::Value {
    // Anything that parses as a TOML value keeps its type; the rest is a string.
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("bad override key `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
