use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{load_container, save_container, Container, Dtype, Tensor, TensorData};
use crate::assemble::{CompressedSlot, MixedModel, Provenance, SlotKind};
use crate::compress::RankPlan;
use crate::error::{Error, FormatError, Result};
use crate::linalg::DenseMatrix;
use crate::model::{
    LayerNorm, LayerParams, LayerSpec, LayerStack, LayerWeights, Model, ModelConfig, ModelHead,
};
use crate::quant::{is_quantized_tensor, QuantizedLayer, QuantizedTensor};

pub const CHECKPOINT_KIND: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CompressedMeta {
    spec: LayerSpec,
    plan: RankPlan,
    quantized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SlotMeta {
    original: LayerSpec,
    compressed: Option<CompressedMeta>,
    active: SlotKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    config: ModelConfig,
    dtype: Dtype,
    layers: Vec<SlotMeta>,
    provenance: Provenance,
}

fn layer_tensors(prefix: &str, w: &LayerWeights, quantized: Option<&QuantizedLayer>, dtype: Dtype, out: &mut Vec<Tensor>) {
    let mut q_iter = quantized.map(|q| q.tensors.iter());
    w.for_each_param(&mut |p| {
        let name = format!("{prefix}/{}", p.name);
        match q_iter.as_mut() {
            Some(it) if is_quantized_tensor(&p.name, &p.dims) => {
                let (qname, q) = it.next().expect("quantized layer covers every weight matrix");
                debug_assert_eq!(*qname, p.name);
                out.push(Tensor::quantized(name, q.clone()));
            }
            _ => out.push(Tensor::float(name, p.dims.clone(), p.data, dtype)),
        }
    });
}

/// Encodes a mixed model as named tensors plus header metadata.
pub fn checkpoint_tensors(model: &MixedModel, dtype: Dtype) -> (serde_json::Value, Vec<Tensor>) {
    let mut tensors = Vec::new();
    for (name, dims, data) in model.head().tensors() {
        tensors.push(Tensor::float(format!("head/{name}"), dims, data, dtype));
    }
    let mut layers = Vec::new();
    for j in 0..model.layer_count() {
        let original = model.original(j).weights();
        layer_tensors(&format!("layer{j}/original"), original, None, dtype, &mut tensors);
        let compressed = model.compressed(j).map(|slot| {
            let quantized = match slot {
                CompressedSlot::Quantized(q) => Some(q),
                CompressedSlot::Full(_) => None,
            };
            layer_tensors(&format!("layer{j}/compressed"), slot.layer().weights(), quantized, dtype, &mut tensors);
            CompressedMeta {
                spec: slot.layer().weights().spec(),
                plan: *slot.layer().plan(),
                quantized: slot.is_quantized(),
            }
        });
        layers.push(SlotMeta {
            original: original.spec(),
            compressed,
            active: model.active()[j],
        });
    }
    let meta = CheckpointMeta {
        config: *model.config(),
        dtype,
        layers,
        provenance: model.provenance.clone(),
    };
    (serde_json::to_value(meta).expect("checkpoint metadata serializes"), tensors)
}

pub fn save_checkpoint(path: &Path, model: &MixedModel, dtype: Dtype) -> Result<()> {
    let (meta, tensors) = checkpoint_tensors(model, dtype);
    save_container(path, CHECKPOINT_KIND, meta, &tensors)
}

/// Saves an uncompressed model.
pub fn save_model(path: &Path, model: &Model, dtype: Dtype) -> Result<()> {
    save_checkpoint(path, &MixedModel::from_model(model.clone()), dtype)
}

struct TensorPool(HashMap<String, Tensor>);

impl TensorPool {
    fn take(&mut self, name: &str, dims: &[usize]) -> Result<Tensor> {
        let t = self
            .0
            .remove(name)
            .ok_or_else(|| FormatError::MissingTensor(name.to_string()))?;
        if t.dims != dims {
            return Err(FormatError::BadTensor {
                tensor: name.to_string(),
                detail: format!("dims {:?}, expected {dims:?}", t.dims),
            }
            .into());
        }
        Ok(t)
    }

    fn take_float(&mut self, name: &str, dims: &[usize]) -> Result<Vec<f64>> {
        let t = self.take(name, dims)?;
        t.to_f64().ok_or_else(|| {
            FormatError::BadTensor {
                tensor: name.to_string(),
                detail: "expected a floating-point tensor".into(),
            }
            .into()
        })
    }

    fn take_matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<DenseMatrix> {
        DenseMatrix::new(rows, cols, self.take_float(name, &[rows, cols])?)
    }
}

fn fill_layer(
    pool: &mut TensorPool,
    prefix: &str,
    cfg: &ModelConfig,
    spec: &LayerSpec,
    quantized: bool,
) -> Result<(LayerWeights, Vec<(String, QuantizedTensor)>)> {
    let mut w = LayerWeights::zeros(cfg, spec);
    let mut qs = Vec::new();
    let mut err = None;
    w.for_each_param_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        let name = format!("{prefix}/{}", p.name);
        let res = if quantized && is_quantized_tensor(&p.name, &p.dims) {
            pool.take(&name, &p.dims).and_then(|t| match t.data {
                TensorData::I8(q) => {
                    qs.push((p.name.clone(), q));
                    Ok(())
                }
                _ => Err(FormatError::BadTensor {
                    tensor: name.clone(),
                    detail: "expected an int8 tensor".into(),
                }
                .into()),
            })
        } else {
            pool.take_float(&name, &p.dims).map(|v| p.data.copy_from_slice(&v))
        };
        if let Err(e) = res {
            err = Some(e);
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok((w, qs)),
    }
}

fn format_err(detail: impl Into<String>) -> Error {
    FormatError::Header(detail.into()).into()
}

/// Rebuilds a mixed model from a decoded checkpoint container.
pub fn checkpoint_from_container(c: Container) -> Result<MixedModel> {
    if c.kind() != CHECKPOINT_KIND {
        return Err(format_err(format!("expected a {CHECKPOINT_KIND} container, found `{}`", c.kind())));
    }
    let meta: CheckpointMeta =
        serde_json::from_value(c.header.meta.clone()).map_err(|e| format_err(e.to_string()))?;
    let cfg = meta.config;
    cfg.validate().map_err(|e| format_err(e.to_string()))?;
    if meta.layers.len() != cfg.dims.n_layers {
        return Err(format_err(format!(
            "{} layer slots for n_layers = {}",
            meta.layers.len(),
            cfg.dims.n_layers
        )));
    }
    let mut pool = TensorPool(c.tensors.into_iter().map(|t| (t.name.clone(), t)).collect());
    let (v, d) = (cfg.dims.vocab, cfg.dims.d_model);
    let final_norm = if cfg.ff_residual_pre_ln {
        Some(LayerNorm {
            gain: pool.take_float("head/final_norm.gain", &[d])?,
            bias: pool.take_float("head/final_norm.bias", &[d])?,
        })
    } else {
        None
    };
    let head = ModelHead {
        embedding: pool.take_matrix("head/embedding", v, d)?,
        readout: pool.take_matrix("head/readout", v, d)?,
        readout_bias: pool.take_float("head/readout_bias", &[v])?,
        final_norm,
    };
    let mut originals = Vec::new();
    let mut compressed = Vec::new();
    let mut active = Vec::new();
    for (j, slot) in meta.layers.iter().enumerate() {
        let (w, _) = fill_layer(&mut pool, &format!("layer{j}/original"), &cfg, &slot.original, false)?;
        originals.push(LayerParams::new(w, &cfg)?);
        let c = match &slot.compressed {
            None => None,
            Some(cm) => {
                cm.plan.validate(&cfg.dims)?;
                let (w, qs) = fill_layer(&mut pool, &format!("layer{j}/compressed"), &cfg, &cm.spec, cm.quantized)?;
                Some(if cm.quantized {
                    CompressedSlot::Quantized(QuantizedLayer::from_parts(qs, w, cm.plan, &cfg)?)
                } else {
                    CompressedSlot::Full(crate::model::CompressedLayerParams::new(w, cm.plan, &cfg)?)
                })
            }
        };
        compressed.push(c);
        active.push(slot.active);
    }
    if let Some(name) = pool.0.keys().min() {
        return Err(FormatError::UndeclaredTensor(name.clone()).into());
    }
    let model = Model::new(cfg, head, originals)?;
    let mut mixed = MixedModel::from_parts(model, compressed, active)?;
    mixed.provenance = meta.provenance;
    Ok(mixed)
}

pub fn load_checkpoint(path: &Path) -> Result<MixedModel> {
    checkpoint_from_container(load_container(path)?)
}

/// Loads a checkpoint that holds no compressed slots.
pub fn load_model(path: &Path) -> Result<Model> {
    let mixed = load_checkpoint(path)?;
    if mixed.compressed_slots().iter().any(Option::is_some) {
        return Err(Error::Assembly(format!(
            "{} holds compressed slots; load it as a mixed model",
            path.display()
        )));
    }
    Ok(mixed.source_model())
}
