//! Mixed models: any subset of layers swapped for their compressed
//! counterparts, without retraining, plus compression sweeps.
//!
//! Compressed layers were fitted against the original model's hidden
//! states, so every slot is trained to behave like the original layer in
//! its original surroundings. Slots therefore compose freely.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compress::{accounting, CompressionPlan, SizeReport};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::model::{
    model_forward, CompressedLayerParams, LayerParams, LayerStack, LayerWeights, Model,
    ModelConfig, ModelHead,
};
use crate::quant::QuantizedLayer;

/// A compressed layer, full precision or int8.
#[derive(Debug, Clone, PartialEq)]
pub enum CompressedSlot {
    Full(CompressedLayerParams),
    Quantized(QuantizedLayer),
}

impl CompressedSlot {
    /// The parameters compute uses (dequantized for int8 slots).
    pub fn layer(&self) -> &CompressedLayerParams {
        match self {
            CompressedSlot::Full(l) => l,
            CompressedSlot::Quantized(q) => &q.layer,
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, CompressedSlot::Quantized(_))
    }
}

/// Which version of a layer is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    Original,
    Compressed,
}

/// Where a mixed model came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Content hash of the source checkpoint, when loaded from disk.
    pub source_hash: String,
    pub plan: Option<CompressionPlan>,
    pub seed: Option<u64>,
    /// Hash of the run configuration that produced the model.
    #[serde(default)]
    pub config_hash: String,
    /// Synthetic task the source model was trained on, if any.
    #[serde(default)]
    pub task: Option<crate::pipeline::Task>,
}

/// Original layers, optional compressed counterparts, and which one runs.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedModel {
    config: ModelConfig,
    head: ModelHead,
    originals: Vec<LayerParams>,
    compressed: Vec<Option<CompressedSlot>>,
    active: Vec<SlotKind>,
    pub provenance: Provenance,
}

impl MixedModel {
    /// All slots original, no compressed counterparts yet.
    pub fn from_model(model: Model) -> Self {
        let n = model.layers.len();
        Self {
            config: model.config,
            head: model.head,
            originals: model.layers,
            compressed: vec![None; n],
            active: vec![SlotKind::Original; n],
            provenance: Provenance::default(),
        }
    }

    /// Assembles from parts, validating every slot against the config.
    pub fn from_parts(
        model: Model,
        compressed: Vec<Option<CompressedSlot>>,
        active: Vec<SlotKind>,
    ) -> Result<Self> {
        let n = model.layers.len();
        if compressed.len() != n || active.len() != n {
            return Err(Error::Assembly(format!(
                "{} compressed slots and {} active flags for {n} layers",
                compressed.len(),
                active.len()
            )));
        }
        for (i, (c, a)) in compressed.iter().zip(&active).enumerate() {
            if let Some(c) = c {
                c.layer().weights().validate(&model.config)?;
            } else if *a == SlotKind::Compressed {
                return Err(Error::Assembly(format!("layer {i} active as compressed but has no compressed slot")));
            }
        }
        Ok(Self {
            config: model.config,
            head: model.head,
            originals: model.layers,
            compressed,
            active,
            provenance: Provenance::default(),
        })
    }

    /// Installs a compressed slot for layer `index` and activates it.
    pub fn with_compressed(mut self, index: usize, slot: CompressedSlot) -> Result<Self> {
        if index >= self.originals.len() {
            return Err(Error::Assembly(format!("layer {index} out of range")));
        }
        slot.layer().weights().validate(&self.config)?;
        self.compressed[index] = Some(slot);
        self.active[index] = SlotKind::Compressed;
        Ok(self)
    }

    /// Copy with only layer `index` switched to `kind`.
    pub fn swap(&self, index: usize, kind: SlotKind) -> Result<Self> {
        let mut out = self.clone();
        out.set_active(index, kind)?;
        Ok(out)
    }

    /// In-place form of [`swap`](Self::swap).
    pub fn set_active(&mut self, index: usize, kind: SlotKind) -> Result<()> {
        if index >= self.originals.len() {
            return Err(Error::Assembly(format!(
                "layer {index} out of range for {} layers",
                self.originals.len()
            )));
        }
        if kind == SlotKind::Compressed && self.compressed[index].is_none() {
            return Err(Error::Assembly(format!("layer {index} has no compressed slot")));
        }
        self.active[index] = kind;
        Ok(())
    }

    /// Activates exactly the listed compressed layers; all others original.
    pub fn with_active_set(&self, compressed: &[usize]) -> Result<Self> {
        let mut out = self.clone();
        for i in 0..out.active.len() {
            out.active[i] = SlotKind::Original;
        }
        for &i in compressed {
            out.set_active(i, SlotKind::Compressed)?;
        }
        Ok(out)
    }

    pub fn active(&self) -> &[SlotKind] {
        &self.active
    }

    pub fn original(&self, index: usize) -> &LayerParams {
        &self.originals[index]
    }

    pub fn compressed(&self, index: usize) -> Option<&CompressedSlot> {
        self.compressed[index].as_ref()
    }

    pub fn compressed_slots(&self) -> &[Option<CompressedSlot>] {
        &self.compressed
    }

    /// The never-compressed model.
    pub fn source_model(&self) -> Model {
        Model {
            config: self.config,
            head: self.head.clone(),
            layers: self.originals.clone(),
        }
    }

    /// Size of the active configuration.
    pub fn size_report(&self) -> SizeReport {
        let layers: Vec<(&LayerWeights, bool)> = (0..self.originals.len())
            .map(|i| match (self.active[i], &self.compressed[i]) {
                (SlotKind::Compressed, Some(c)) => (c.layer().weights(), c.is_quantized()),
                _ => (self.originals[i].weights(), false),
            })
            .collect();
        let other = self.head.param_count()
            + layers
                .iter()
                .map(|(w, _)| w.param_count() - w.attention_weight_count() - w.ff_weight_count())
                .sum::<usize>();
        accounting(&self.config.dims, &layers, other).expect("slots validated on insertion")
    }
}

impl LayerStack for MixedModel {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn head(&self) -> &ModelHead {
        &self.head
    }

    fn layer_count(&self) -> usize {
        self.originals.len()
    }

    fn layer(&self, index: usize) -> &LayerWeights {
        match (self.active[index], &self.compressed[index]) {
            (SlotKind::Compressed, Some(c)) => c.layer().weights(),
            _ => self.originals[index].weights(),
        }
    }
}

/// Logits of `model` on every input.
pub fn all_logits<M: LayerStack + ?Sized>(model: &M, inputs: &[Vec<usize>]) -> Result<Vec<DenseMatrix>> {
    inputs.par_iter().map(|t| model_forward(model, t)).collect()
}

/// `sqrt(Σ‖L′ − L‖_F²) / sqrt(Σ‖L‖_F²)` over paired logit matrices.
pub fn relative_divergence(reference: &[DenseMatrix], candidate: &[DenseMatrix]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (r, c) in reference.iter().zip(candidate) {
        for (a, b) in r.data().iter().zip(c.data()) {
            num += (b - a) * (b - a);
            den += a * a;
        }
    }
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy predictions, one per position.
pub fn greedy_tokens(logits: &DenseMatrix) -> Vec<usize> {
    (0..logits.rows()).map(|i| argmax(logits.row(i))).collect()
}

/// Fraction of positions where both logit sets pick the same token.
pub fn argmax_agreement(reference: &[DenseMatrix], candidate: &[DenseMatrix]) -> f64 {
    let mut same = 0usize;
    let mut total = 0usize;
    for (r, c) in reference.iter().zip(candidate) {
        for i in 0..r.rows() {
            total += 1;
            same += usize::from(argmax(r.row(i)) == argmax(c.row(i)));
        }
    }
    if total == 0 {
        1.0
    } else {
        same as f64 / total as f64
    }
}

/// Order in which layers are switched to their compressed slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepOrder {
    /// First layer first.
    Successive,
    /// Lowest per-layer objective first (the most faithful slots go in
    /// earliest). One value per layer.
    ByObjective(Vec<f64>),
    Explicit(Vec<usize>),
}

impl SweepOrder {
    pub fn resolve(&self, n_layers: usize) -> Result<Vec<usize>> {
        let order: Vec<usize> = match self {
            SweepOrder::Successive => (0..n_layers).collect(),
            SweepOrder::ByObjective(obj) => {
                if obj.len() != n_layers || obj.iter().any(|v| v.is_nan()) {
                    return Err(Error::Assembly(
                        "sweep objectives must give one number per layer".into(),
                    ));
                }
                let mut idx: Vec<usize> = (0..n_layers).collect();
                idx.sort_by(|&a, &b| obj[a].total_cmp(&obj[b]).then(a.cmp(&b)));
                idx
            }
            SweepOrder::Explicit(v) => v.clone(),
        };
        let mut seen = vec![false; n_layers];
        for &i in &order {
            if i >= n_layers || seen[i] {
                return Err(Error::Assembly(format!("invalid sweep order {order:?}")));
            }
            seen[i] = true;
        }
        Ok(order)
    }
}

/// One point of a compression sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub compressed_layers: Vec<usize>,
    /// Removed fraction of the compressible weights.
    pub removed_fraction: f64,
    pub byte_fraction: f64,
    pub divergence: f64,
    pub agreement: f64,
}

/// Compresses `0, 1, …, k` layers in `order` and measures each
/// configuration against the all-original model on `inputs`.
pub fn sweep(model: &MixedModel, order: &SweepOrder, inputs: &[Vec<usize>]) -> Result<Vec<SweepPoint>> {
    let order = order.resolve(model.layer_count())?;
    for &i in &order {
        if model.compressed(i).is_none() {
            return Err(Error::Assembly(format!("layer {i} has no compressed slot")));
        }
    }
    let base = model.with_active_set(&[])?;
    let reference = all_logits(&base, inputs)?;
    (0..=order.len())
        .into_par_iter()
        .map(|k| {
            let set = order[..k].to_vec();
            let m = model.with_active_set(&set)?;
            let logits = all_logits(&m, inputs)?;
            let size = m.size_report();
            Ok(SweepPoint {
                compressed_layers: set,
                removed_fraction: size.removed_fraction(),
                byte_fraction: size.byte_fraction(),
                divergence: relative_divergence(&reference, &logits),
                agreement: argmax_agreement(&reference, &logits),
            })
        })
        .collect()
}
