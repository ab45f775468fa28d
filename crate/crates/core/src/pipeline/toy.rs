use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{purpose_rng, sample_inputs, token_accuracy, InputDistribution, Task};
use super::{DataSection, RunConfig, ToySection};
use crate::assemble::all_logits;
use crate::error::{Error, Result};
use crate::finetune::{Adam, AdamConfig};
use crate::linalg::{svd, DenseMatrix};
use crate::model::{model_forward_backward, LayerWeights, Linear, Model, ModelHead};

const GEN_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const HOLDOUT_STREAM: u64 = 2;

/// Random toy model for the run's dims and seed, rounded through f32 so it
/// survives an f32 checkpoint unchanged.
///
/// With `spectral_decay = α > 0` every per-head projection block and FF
/// matrix keeps its singular vectors and Frobenius norm but gets singular
/// values proportional to `(k + 1)^-α`.
pub fn gen_toy(cfg: &RunConfig) -> Result<Model> {
    let config = cfg.model_config()?;
    let mut model = Model::random(config, cfg.model.biases, &mut purpose_rng(cfg.seed, GEN_STREAM))?;
    let alpha = cfg.model.spectral_decay;
    if alpha > 0.0 {
        let dh = config.dims.d_head;
        for layer in &mut model.layers {
            let w = layer.weights_mut();
            for m in [&mut w.attn.wq, &mut w.attn.wk, &mut w.attn.wv, &mut w.attn.wo_t] {
                for h in 0..config.dims.n_heads {
                    let rows = h * dh..(h + 1) * dh;
                    let shaped = shape_spectrum(&m.row_block(rows.clone()), alpha)?;
                    m.set_row_block(rows.start, &shaped);
                }
            }
            for lin in [&mut w.ff.w1, &mut w.ff.w2] {
                if let Linear::Dense(m) = lin {
                    *m = shape_spectrum(m, alpha)?;
                }
            }
        }
    }
    model.round_to_f32();
    Ok(model)
}

fn shape_spectrum(m: &DenseMatrix, alpha: f64) -> Result<DenseMatrix> {
    let mut s = svd(m)?;
    let energy: f64 = s.sigma.iter().map(|x| x * x).sum();
    let profile: Vec<f64> = (0..s.sigma.len()).map(|k| (k as f64 + 1.0).powf(-alpha)).collect();
    let c = (energy / profile.iter().map(|p| p * p).sum::<f64>()).sqrt();
    s.sigma = profile.iter().map(|p| c * p).collect();
    Ok(s.reconstruct(s.sigma.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainReport {
    pub task: Task,
    pub steps: usize,
    /// Mean token cross-entropy per step.
    pub losses: Vec<f64>,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
}

fn flatten(model: &Model) -> Vec<f64> {
    let mut v = Vec::with_capacity(model.param_count());
    for (_, _, data) in model.head.tensors() {
        v.extend_from_slice(data);
    }
    for l in &model.layers {
        v.extend(l.weights().flatten());
    }
    v
}

fn flatten_grads(head: &ModelHead, layers: &[LayerWeights], out: &mut Vec<f64>) {
    out.clear();
    for (_, _, data) in head.tensors() {
        out.extend_from_slice(data);
    }
    for l in layers {
        out.extend(l.flatten());
    }
}

fn load(model: &mut Model, flat: &[f64]) {
    let mut off = 0;
    for (_, data) in model.head.tensors_mut() {
        data.copy_from_slice(&flat[off..off + data.len()]);
        off += data.len();
    }
    for l in &mut model.layers {
        let w = l.weights_mut();
        let n = w.param_count();
        w.load_flat(&flat[off..off + n]);
        off += n;
    }
}

/// Softmax cross-entropy summed over rows; writes `(softmax − onehot)·scale`.
fn cross_entropy(logits: &DenseMatrix, targets: &[usize], scale: f64) -> (f64, DenseMatrix) {
    let mut d = DenseMatrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        loss += z.ln() + m - row[t];
        for (j, o) in d.row_mut(i).iter_mut().enumerate() {
            *o = ((row[j] - m).exp() / z - f64::from(u8::from(j == t))) * scale;
        }
    }
    (loss, d)
}

/// Trains every parameter of `model` end to end with Adam on `toy.task`,
/// using broad-distribution sequences. Deterministic per seed.
pub fn train_toy(mut model: Model, toy: &ToySection, data: &DataSection, seed: u64) -> Result<(Model, ToyTrainReport)> {
    let vocab = model.config.dims.vocab;
    let holdout = sample_inputs(data, vocab, InputDistribution::Broad, toy.holdout.max(1), &mut purpose_rng(seed, HOLDOUT_STREAM));
    let accuracy = |m: &Model| -> Result<f64> { Ok(token_accuracy(toy.task, &holdout, &all_logits(m, &holdout)?)) };
    let initial_accuracy = accuracy(&model)?;

    let mut rng = purpose_rng(seed, TRAIN_STREAM);
    let adam_cfg = AdamConfig {
        learning_rate: toy.learning_rate,
        ..AdamConfig::default()
    };
    let mut params = flatten(&model);
    let mask = vec![true; params.len()];
    let mut adam = Adam::new(adam_cfg, params.len());
    let mut grads = Vec::with_capacity(params.len());
    let mut losses = Vec::with_capacity(toy.steps);
    for step in 0..toy.steps {
        let batch = sample_inputs(data, vocab, InputDistribution::Broad, toy.batch_size, &mut rng);
        let tokens_total: usize = batch.iter().map(Vec::len).sum();
        let scale = 1.0 / tokens_total as f64;
        let per_sample: Vec<(f64, ModelHead, Vec<LayerWeights>)> = batch
            .par_iter()
            .map(|tokens| {
                let mut gh = model.head.zeros_like();
                let mut gl: Vec<LayerWeights> = model.layers.iter().map(|l| l.weights().zeros_like()).collect();
                let targets = toy.task.targets(tokens);
                let mut loss = 0.0;
                model_forward_backward(&model, tokens, &mut gh, &mut gl, |logits| {
                    let (l, d) = cross_entropy(logits, &targets, scale);
                    loss = l;
                    d
                })?;
                Ok((loss, gh, gl))
            })
            .collect::<Result<_>>()?;
        let mut loss = 0.0;
        let mut total: Option<Vec<f64>> = None;
        for (l, gh, gl) in &per_sample {
            loss += l;
            flatten_grads(gh, gl, &mut grads);
            match total.as_mut() {
                None => total = Some(grads.clone()),
                Some(t) => t.iter_mut().zip(&grads).for_each(|(a, b)| *a += b),
            }
        }
        let loss = loss * scale;
        let total = total.expect("batch is non-empty");
        if !loss.is_finite() || total.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                layer: None,
                epoch: step,
                detail: format!("toy training loss became {loss}"),
            });
        }
        losses.push(loss);
        adam.step(&mut params, &total, &mask);
        load(&mut model, &params);
    }
    let final_accuracy = accuracy(&model)?;
    Ok((
        model,
        ToyTrainReport {
            task: toy.task,
            steps: toy.steps,
            losses,
            initial_accuracy,
            final_accuracy,
        },
    ))
}
