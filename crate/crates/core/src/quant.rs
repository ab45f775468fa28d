//! Per-row symmetric int8 quantization and quantization-aware fine-tuning.

use serde::{Deserialize, Serialize};

use crate::compress::RankPlan;
use crate::error::{Error, Result};
use crate::finetune::{train_weights, TrainConfig, TrainReport};
use crate::linalg::DenseMatrix;
use crate::model::{CompressedLayerParams, HiddenStatePairSet, LayerWeights, ModelConfig};

/// Quantization applied during fine-tuning and export.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantLevel {
    #[default]
    None,
    Int8,
}

/// Int8 codes with one `f32` scale per row.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    codes: Vec<i8>,
    scales: Vec<f32>,
}

impl QuantizedTensor {
    pub fn from_parts(rows: usize, cols: usize, codes: Vec<i8>, scales: Vec<f32>) -> Result<Self> {
        if codes.len() != rows * cols || scales.len() != rows {
            return Err(Error::shape(format!(
                "quantized tensor {rows}x{cols} with {} codes and {} scales",
                codes.len(),
                scales.len()
            )));
        }
        if codes.iter().any(|&c| c == i8::MIN) {
            return Err(Error::Input("int8 code -128 is outside the symmetric range".into()));
        }
        if scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Input("int8 scales must be positive and finite".into()));
        }
        Ok(Self {
            rows,
            cols,
            codes,
            scales,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    /// `rows·cols` code bytes plus four bytes per row scale.
    pub fn storage_bytes(&self) -> usize {
        self.codes.len() + 4 * self.scales.len()
    }
}

/// Row scale `absmax/127` (nearest `f32`), codes `round_half_even(x/scale)` clamped to ±127.
/// All-zero rows get scale 1.
pub fn quantize(m: &DenseMatrix) -> QuantizedTensor {
    let (rows, cols) = m.shape();
    let mut codes = Vec::with_capacity(rows * cols);
    let mut scales = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = m.row(i);
        let absmax = row.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        let scale = if absmax > 0.0 {
            let s = (absmax / 127.0) as f32;
            if s > 0.0 {
                s
            } else {
                f32::MIN_POSITIVE
            }
        } else {
            1.0
        };
        let s = scale as f64;
        codes.extend(
            row.iter()
                .map(|&x| (x / s).round_ties_even().clamp(-127.0, 127.0) as i8),
        );
        scales.push(scale);
    }
    QuantizedTensor {
        rows,
        cols,
        codes,
        scales,
    }
}

pub fn dequantize(q: &QuantizedTensor) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(q.rows, q.cols);
    for i in 0..q.rows {
        let s = q.scales[i] as f64;
        let codes = &q.codes[i * q.cols..(i + 1) * q.cols];
        for (o, &c) in out.row_mut(i).iter_mut().zip(codes) {
            *o = c as f64 * s;
        }
    }
    out
}

/// Whether a named layer tensor is a weight matrix that int8 storage covers.
/// Biases, norms and the folded query-bias term stay in full precision.
pub fn is_quantized_tensor(name: &str, dims: &[usize]) -> bool {
    dims.len() == 2 && name != "attn.qk_bias"
}

fn round_trip(data: &mut [f64], rows: usize, cols: usize) {
    let m = DenseMatrix::new(rows, cols, data.to_vec()).expect("consistent tensor shape");
    data.copy_from_slice(dequantize(&quantize(&m)).data());
}

/// Layer with every weight matrix replaced by `dequantize(quantize(·))`.
pub fn fake_quantize_layer(w: &LayerWeights) -> LayerWeights {
    let mut out = w.clone();
    out.for_each_param_mut(&mut |p| {
        if is_quantized_tensor(&p.name, &p.dims) {
            round_trip(p.data, p.dims[0], p.dims[1]);
        }
    });
    out
}

/// A compressed layer stored as int8 factors.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    /// Int8 tensors keyed by parameter name, in parameter order.
    pub tensors: Vec<(String, QuantizedTensor)>,
    /// The layer compute uses: dequantized matrices plus full-precision
    /// biases and norms.
    pub layer: CompressedLayerParams,
}

impl QuantizedLayer {
    pub fn from_layer(layer: &CompressedLayerParams, cfg: &ModelConfig) -> Result<Self> {
        let mut tensors = Vec::new();
        layer.weights().for_each_param(&mut |p| {
            if is_quantized_tensor(&p.name, &p.dims) {
                let m = DenseMatrix::new(p.dims[0], p.dims[1], p.data.to_vec())
                    .expect("consistent tensor shape");
                tensors.push((p.name.clone(), quantize(&m)));
            }
        });
        let deq = fake_quantize_layer(layer.weights());
        Ok(Self {
            tensors,
            layer: CompressedLayerParams::new(deq, *layer.plan(), cfg)?,
        })
    }

    /// Rebuilds from stored int8 tensors and full-precision remainder.
    /// `rest` supplies the non-quantized parameters; its matrices are overwritten.
    pub fn from_parts(
        tensors: Vec<(String, QuantizedTensor)>,
        mut rest: LayerWeights,
        plan: RankPlan,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let mut missing = Vec::new();
        let mut idx = 0;
        rest.for_each_param_mut(&mut |p| {
            if !is_quantized_tensor(&p.name, &p.dims) {
                return;
            }
            match tensors.get(idx) {
                Some((name, q)) if *name == p.name && [q.rows(), q.cols()] == p.dims[..] => {
                    p.data.copy_from_slice(dequantize(q).data());
                }
                _ => missing.push(p.name.clone()),
            }
            idx += 1;
        });
        if !missing.is_empty() || idx != tensors.len() {
            return Err(Error::shape(format!(
                "quantized tensors do not match the layer structure (mismatched: {missing:?})"
            )));
        }
        Ok(Self {
            tensors,
            layer: CompressedLayerParams::new(rest, plan, cfg)?,
        })
    }

    pub fn storage_bytes(&self) -> usize {
        self.tensors.iter().map(|(_, q)| q.storage_bytes()).sum()
    }
}

/// Fine-tunes with weights fake-quantized in the forward pass and
/// straight-through gradients, then exports int8 factors.
///
/// The reported losses are evaluated at the quantized parameters. With
/// `train.quantize == QuantLevel::None` this is plain fine-tuning followed by
/// a single post-training quantization.
pub fn finetune_layer_quantized(
    layer: CompressedLayerParams,
    cfg: &ModelConfig,
    pairs: &HiddenStatePairSet,
    train: &TrainConfig,
) -> Result<(QuantizedLayer, TrainReport)> {
    let plan = *layer.plan();
    let (weights, report) = train_weights(layer.into_weights(), cfg, pairs, train)?;
    let trained = CompressedLayerParams::new(weights, plan, cfg)?;
    Ok((QuantizedLayer::from_layer(&trained, cfg)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_matrix() {
        let q = quantize(&DenseMatrix::zeros(3, 4));
        assert!(q.codes().iter().all(|&c| c == 0));
        assert!(q.scales().iter().all(|&s| s == 1.0));
        assert!(dequantize(&q).is_zero());
    }

    #[test]
    fn documented_row() {
        let m = DenseMatrix::from_rows(&[[0.5, -1.0]]).unwrap();
        let q = quantize(&m);
        assert_eq!(q.scales()[0], (1.0f64 / 127.0) as f32);
        assert_eq!(q.codes(), &[64, -127]);
        let d = dequantize(&q);
        assert!((d.get(0, 0) - 0.50394).abs() < 1e-5);
        assert!((d.get(0, 1) + 1.0).abs() < 1e-7);
    }

    #[test]
    fn full_codes() {
        let q = QuantizedTensor::from_parts(2, 2, vec![127; 4], vec![0.25, 0.5]).unwrap();
        let d = dequantize(&q);
        assert_eq!(d.row(0), &[31.75, 31.75]);
        assert_eq!(d.row(1), &[63.5, 63.5]);
        assert!(QuantizedTensor::from_parts(1, 2, vec![-128, 0], vec![1.0]).is_err());
        assert!(QuantizedTensor::from_parts(1, 2, vec![0, 0], vec![0.0]).is_err());
    }

    #[test]
    fn mean_error_is_a_quarter_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = 1000;
        let cols = 100;
        let m = DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        let q = quantize(&m);
        let d = dequantize(&q);
        let mut total = 0.0;
        for i in 0..rows {
            let s = q.scales()[i] as f64;
            for j in 0..cols {
                total += (m.get(i, j) - d.get(i, j)).abs() / s;
            }
        }
        let mean = total / (rows * cols) as f64;
        assert!((mean - 0.25).abs() < 0.05, "{mean}");
    }

    proptest! {
        #[test]
        fn error_bounded_by_half_scale(
            rows in 1usize..6,
            cols in 1usize..9,
            seed in any::<u64>(),
            mag in 1e-6f64..1e6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-mag..mag));
            let q = quantize(&m);
            let d = dequantize(&q);
            for i in 0..rows {
                let s = q.scales()[i] as f64;
                for j in 0..cols {
                    prop_assert!((m.get(i, j) - d.get(i, j)).abs() <= s / 2.0 * (1.0 + 1e-12));
                }
            }
            prop_assert!(q.codes().iter().all(|&c| (-127..=127).contains(&c)));
            // Idempotent on codes.
            let again = quantize(&d);
            prop_assert_eq!(again.codes(), q.codes());
        }
    }
}
