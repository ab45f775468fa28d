use serde::{Deserialize, Serialize};

use super::{CompressionPlan, LayerPlan, RankPlan};
use crate::error::{Error, Result};
use crate::model::{HeadLayout, LayerWeights, Linear, ModelDims};

/// Storage of the compressible weights (attention projections and FF
/// matrices) of one layer. Biases and norms are not counted here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSize {
    pub index: usize,
    pub compressed: bool,
    pub quantized: bool,
    /// `4d² + 2·d·d_ff`.
    pub original_params: usize,
    pub params: usize,
    /// `original_params · 4`.
    pub original_bytes_f32: usize,
    /// Exact bytes: 4 per entry, or for int8 tensors one per entry plus a
    /// 4-byte scale per row.
    pub bytes: usize,
}

impl LayerSize {
    pub fn retained_fraction(&self) -> f64 {
        self.params as f64 / self.original_params as f64
    }

    pub fn byte_fraction(&self) -> f64 {
        self.bytes as f64 / self.original_bytes_f32 as f64
    }
}

/// Whole-model size report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub layers: Vec<LayerSize>,
    /// Parameters outside the compressible weights (biases, norms,
    /// embedding, readout). Zero when the report was built from a plan.
    pub other_params: usize,
}

impl SizeReport {
    pub fn original_params(&self) -> usize {
        self.layers.iter().map(|l| l.original_params).sum()
    }

    pub fn params(&self) -> usize {
        self.layers.iter().map(|l| l.params).sum()
    }

    pub fn bytes(&self) -> usize {
        self.layers.iter().map(|l| l.bytes).sum()
    }

    pub fn original_bytes_f32(&self) -> usize {
        self.layers.iter().map(|l| l.original_bytes_f32).sum()
    }

    /// Retained parameter fraction of the compressible weights.
    pub fn retained_fraction(&self) -> f64 {
        self.params() as f64 / self.original_params() as f64
    }

    pub fn removed_fraction(&self) -> f64 {
        1.0 - self.retained_fraction()
    }

    /// Exact storage bytes over the 32-bit original.
    pub fn byte_fraction(&self) -> f64 {
        self.bytes() as f64 / self.original_bytes_f32() as f64
    }

    /// Byte fraction ignoring scale overhead: one byte per quantized
    /// parameter, four per other parameter, over four per original one.
    pub fn nominal_byte_fraction(&self) -> f64 {
        let nominal: usize = self
            .layers
            .iter()
            .map(|l| if l.quantized { l.params } else { 4 * l.params })
            .sum();
        nominal as f64 / (4 * self.original_params()) as f64
    }

    /// Bytes if every unquantized weight were stored at 64-bit.
    pub fn bytes_f64(&self) -> usize {
        self.layers
            .iter()
            .map(|l| if l.quantized { l.bytes } else { 2 * l.bytes })
            .sum()
    }

    pub fn original_bytes_f64(&self) -> usize {
        2 * self.original_bytes_f32()
    }
}

fn tensor_bytes(shapes: &[(usize, usize)], quantized: bool) -> (usize, usize) {
    let params = shapes.iter().map(|(r, c)| r * c).sum();
    let bytes = if quantized {
        shapes.iter().map(|(r, c)| r * c + 4 * r).sum()
    } else {
        4 * params
    };
    (params, bytes)
}

/// `(rows, cols)` of every compressible weight tensor as it is stored.
pub(crate) fn weight_shapes(w: &LayerWeights) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = [&w.attn.wq, &w.attn.wk, &w.attn.wv, &w.attn.wo_t]
        .iter()
        .map(|m| m.shape())
        .collect();
    for lin in [&w.ff.w1, &w.ff.w2] {
        match lin {
            Linear::Dense(m) => out.push(m.shape()),
            Linear::Factored { left, right, .. } => {
                out.push(left.shape());
                out.push(right.shape());
            }
        }
    }
    out
}

fn planned_shapes(dims: &ModelDims, ranks: &RankPlan) -> Vec<(usize, usize)> {
    let (d, dff) = (dims.d_model, dims.d_ff);
    let hk = dims.n_heads * ranks.attention_width();
    let kf = ranks.ff_width();
    vec![
        (hk, d),
        (hk, d),
        (hk, d),
        (hk, d),
        (dff, kf),
        (kf, d),
        (d, kf),
        (kf, dff),
    ]
}

fn original_shapes(dims: &ModelDims) -> Vec<(usize, usize)> {
    let (d, dff) = (dims.d_model, dims.d_ff);
    vec![(d, d), (d, d), (d, d), (d, d), (dff, d), (d, dff)]
}

fn layer_size(dims: &ModelDims, index: usize, shapes: &[(usize, usize)], compressed: bool, quantized: bool) -> LayerSize {
    let original_params = dims.attention_params() + dims.ff_params();
    let (params, bytes) = tensor_bytes(shapes, quantized);
    LayerSize {
        index,
        compressed,
        quantized,
        original_params,
        params,
        original_bytes_f32: 4 * original_params,
        bytes,
    }
}

/// Size report of concrete layers; `quantized[i]` marks int8 storage of layer `i`'s weights.
pub fn accounting(dims: &ModelDims, layers: &[(&LayerWeights, bool)], other_params: usize) -> Result<SizeReport> {
    let layers = layers
        .iter()
        .enumerate()
        .map(|(i, (w, quantized))| {
            let shapes = weight_shapes(w);
            let expected_cols = dims.d_model;
            if w.attn.wq.cols() != expected_cols {
                return Err(Error::shape(format!(
                    "layer {i} has width {}, dims say {expected_cols}",
                    w.attn.wq.cols()
                )));
            }
            let compressed = matches!(w.attn.layout, HeadLayout::Factored { .. });
            Ok(layer_size(dims, i, &shapes, compressed, *quantized))
        })
        .collect::<Result<_>>()?;
    Ok(SizeReport {
        layers,
        other_params,
    })
}

/// Size report predicted from a plan alone.
pub fn accounting_for_plan(dims: &ModelDims, plan: &CompressionPlan) -> SizeReport {
    let layers = plan
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| match l {
            LayerPlan::Keep => layer_size(dims, i, &original_shapes(dims), false, false),
            LayerPlan::Compress { ranks, quantize } => {
                layer_size(dims, i, &planned_shapes(dims, ranks), true, *quantize)
            }
        })
        .collect();
    SizeReport {
        layers,
        other_params: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compress::{compress_layer, FactorInit};
    use crate::model::{LayerParams, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn whisper_base() -> ModelDims {
        ModelDims::new(512, 8, 64, 2048, 6, 51865).unwrap()
    }

    #[test]
    fn whisper_base_retained() {
        let dims = whisper_base();
        let ranks = RankPlan::new(&dims, 32, 8, 162, 18).unwrap();
        let plan = CompressionPlan::uniform(&dims, ranks, false).unwrap();
        let rep = accounting_for_plan(&dims, &plan);
        let expected = (1.0 / 3.0) * 0.625 + (2.0 / 3.0) * (180.0 * 2560.0 / 1_048_576.0);
        assert!((rep.retained_fraction() - expected).abs() < 1e-12);
        assert!((rep.retained_fraction() - 0.5013).abs() < 5e-5);
    }

    #[test]
    fn keep_plan_retains_everything() {
        let dims = whisper_base();
        let plan = CompressionPlan {
            layers: vec![LayerPlan::Keep; 6],
        };
        let rep = accounting_for_plan(&dims, &plan);
        assert_eq!(rep.retained_fraction(), 1.0);
        assert_eq!(rep.byte_fraction(), 1.0);
    }

    #[test]
    fn int8_at_eighty_percent_is_a_fifth_of_the_bytes() {
        let dims = whisper_base();
        // Any plan retaining exactly 0.8 of the weights under int8.
        let rep = SizeReport {
            layers: vec![LayerSize {
                index: 0,
                compressed: true,
                quantized: true,
                original_params: 1000,
                params: 800,
                original_bytes_f32: 4000,
                bytes: 800 + 4 * 10,
            }],
            other_params: 0,
        };
        assert!((rep.nominal_byte_fraction() - 0.2).abs() < 1e-15);
        assert!((rep.byte_fraction() - 0.21).abs() < 1e-15);
        let _ = dims;
    }

    #[test]
    fn quantized_bytes_count_scales_per_row() {
        let dims = ModelDims::new(8, 2, 4, 16, 1, 4).unwrap();
        let ranks = RankPlan::new(&dims, 2, 1, 4, 1).unwrap();
        let plan = CompressionPlan::uniform(&dims, ranks, true).unwrap();
        let rep = accounting_for_plan(&dims, &plan);
        // attention: 4 tensors of 6×8; FF: 16×5, 5×8, 8×5, 5×16
        let elems = 4 * 48 + 80 + 40 + 40 + 80;
        let rows = 4 * 6 + 16 + 5 + 8 + 5;
        assert_eq!(rep.bytes(), elems + 4 * rows);
        assert_eq!(rep.params(), elems);
    }

    #[test]
    fn plan_and_weights_agree() {
        let dims = ModelDims::new(16, 4, 4, 24, 2, 8).unwrap();
        let cfg = ModelConfig::new(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ranks = RankPlan::new(&dims, 2, 1, 8, 2).unwrap();
        let l0 = LayerParams::random(&cfg, true, &mut rng);
        let l1 = LayerParams::random(&cfg, true, &mut rng);
        let c1 = compress_layer(&l1, &cfg, &ranks, FactorInit::Spectral, &mut rng).unwrap();
        for q in [false, true] {
            let plan = CompressionPlan {
                layers: vec![
                    LayerPlan::Keep,
                    LayerPlan::Compress {
                        ranks,
                        quantize: q,
                    },
                ],
            };
            let a = accounting_for_plan(&dims, &plan);
            let b = accounting(&dims, &[(l0.weights(), false), (c1.weights(), q)], 0).unwrap();
            assert_eq!(a, b);
        }
    }
}
