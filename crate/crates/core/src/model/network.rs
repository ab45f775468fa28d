use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::backward::backward_from_cache;
use super::forward::{forward_cached, layer_norm_forward, NormCache};
use super::layer::{LayerNorm, LayerParams, LayerWeights};
use super::{layer_forward, ModelConfig};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Token embedding, readout and (for the pre-LN variant) final norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHead {
    /// `vocab × d`.
    pub embedding: DenseMatrix,
    /// `vocab × d`.
    pub readout: DenseMatrix,
    pub readout_bias: Vec<f64>,
    pub final_norm: Option<LayerNorm>,
}

impl ModelHead {
    pub fn random(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.dims.d_model;
        let v = cfg.dims.vocab;
        let emb = Normal::new(0.0, 1.0).expect("valid std");
        let out = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        Self {
            embedding: DenseMatrix::from_fn(v, d, |_, _| emb.sample(rng)),
            readout: DenseMatrix::from_fn(v, d, |_, _| out.sample(rng)),
            readout_bias: vec![0.0; v],
            final_norm: cfg.ff_residual_pre_ln.then(|| LayerNorm::identity(d)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            embedding: DenseMatrix::zeros(self.embedding.rows(), self.embedding.cols()),
            readout: DenseMatrix::zeros(self.readout.rows(), self.readout.cols()),
            readout_bias: vec![0.0; self.readout_bias.len()],
            final_norm: self.final_norm.as_ref().map(|n| LayerNorm {
                gain: vec![0.0; n.gain.len()],
                bias: vec![0.0; n.bias.len()],
            }),
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let (v, d) = (cfg.dims.vocab, cfg.dims.d_model);
        if self.embedding.shape() != (v, d)
            || self.readout.shape() != (v, d)
            || self.readout_bias.len() != v
        {
            return Err(Error::shape("model head does not match vocab × d"));
        }
        if self.final_norm.is_some() != cfg.ff_residual_pre_ln {
            return Err(Error::shape("final norm must be present exactly in the pre-LN variant"));
        }
        if let Some(n) = &self.final_norm {
            if n.gain.len() != d || n.bias.len() != d {
                return Err(Error::shape("final norm width mismatch"));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.embedding.data().len() + self.readout.data().len() + self.readout_bias.len();
        if let Some(f) = &self.final_norm {
            n += f.gain.len() + f.bias.len();
        }
        n
    }

    /// Named tensors in a fixed order (shared by the optimiser and the store).
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let mut v: Vec<(&'static str, Vec<usize>, &[f64])> = vec![
            ("embedding", vec![self.embedding.rows(), self.embedding.cols()], self.embedding.data()),
            ("readout", vec![self.readout.rows(), self.readout.cols()], self.readout.data()),
            ("readout_bias", vec![self.readout_bias.len()], &self.readout_bias),
        ];
        if let Some(f) = &self.final_norm {
            v.push(("final_norm.gain", vec![f.gain.len()], &f.gain));
            v.push(("final_norm.bias", vec![f.bias.len()], &f.bias));
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut v: Vec<(&'static str, &mut [f64])> = vec![
            ("embedding", self.embedding.data_mut()),
            ("readout", self.readout.data_mut()),
            ("readout_bias", &mut self.readout_bias),
        ];
        if let Some(f) = &mut self.final_norm {
            v.push(("final_norm.gain", &mut f.gain));
            v.push(("final_norm.bias", &mut f.bias));
        }
        v
    }
}

/// Fixed sinusoidal position table, `n × d`.
pub fn sinusoidal_positions(n: usize, d: usize) -> DenseMatrix {
    DenseMatrix::from_fn(n, d, |pos, i| {
        let pair = (i / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / d as f64);
        let angle = pos as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Anything that can run as a stack of layers between a shared head.
pub trait LayerStack: Sync {
    fn config(&self) -> &ModelConfig;
    fn head(&self) -> &ModelHead;
    fn layer_count(&self) -> usize;
    fn layer(&self, index: usize) -> &LayerWeights;
}

/// A stack of original (uncompressed) layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub head: ModelHead,
    pub layers: Vec<LayerParams>,
}

impl Model {
    pub fn random(config: ModelConfig, biases: bool, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let head = ModelHead::random(&config, rng);
        let layers = (0..config.dims.n_layers)
            .map(|_| LayerParams::random(&config, biases, rng))
            .collect();
        Ok(Self {
            config,
            head,
            layers,
        })
    }

    pub fn new(config: ModelConfig, head: ModelHead, layers: Vec<LayerParams>) -> Result<Self> {
        config.validate()?;
        head.validate(&config)?;
        if layers.len() != config.dims.n_layers {
            return Err(Error::shape(format!(
                "{} layers supplied for a {}-layer model",
                layers.len(),
                config.dims.n_layers
            )));
        }
        for l in &layers {
            l.weights().validate(&config)?;
        }
        Ok(Self {
            config,
            head,
            layers,
        })
    }

    /// Rounds every parameter through `f32`, so the model equals its
    /// single-precision checkpoint exactly.
    pub fn round_to_f32(&mut self) {
        for (_, t) in self.head.tensors_mut() {
            t.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
        for l in &mut self.layers {
            l.weights_mut()
                .for_each_param_mut(&mut |p| p.data.iter_mut().for_each(|x| *x = *x as f32 as f64));
        }
    }

    pub fn param_count(&self) -> usize {
        self.head.param_count() + self.layers.iter().map(|l| l.weights().param_count()).sum::<usize>()
    }
}

impl LayerStack for Model {
    fn config(&self) -> &ModelConfig {
        &self.config
    }
    fn head(&self) -> &ModelHead {
        &self.head
    }
    fn layer_count(&self) -> usize {
        self.layers.len()
    }
    fn layer(&self, index: usize) -> &LayerWeights {
        self.layers[index].weights()
    }
}

pub(crate) fn embed(head: &ModelHead, cfg: &ModelConfig, tokens: &[usize]) -> Result<DenseMatrix> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    let d = cfg.dims.d_model;
    let mut x = sinusoidal_positions(tokens.len(), d);
    for (i, &t) in tokens.iter().enumerate() {
        if t >= cfg.dims.vocab {
            return Err(Error::Input(format!(
                "token {t} at position {i} is outside the vocabulary of {}",
                cfg.dims.vocab
            )));
        }
        for (o, &e) in x.row_mut(i).iter_mut().zip(head.embedding.row(t)) {
            *o += e;
        }
    }
    Ok(x)
}

pub(crate) struct HeadCache {
    normed: DenseMatrix,
    norm: Option<NormCache>,
}

pub(crate) type HeadGradients = ModelHead;

pub(crate) fn head_forward_cached(head: &ModelHead, hidden: &DenseMatrix) -> (DenseMatrix, HeadCache) {
    let (normed, norm) = match &head.final_norm {
        Some(ln) => {
            let (y, c) = layer_norm_forward(hidden, ln);
            (y, Some(c))
        }
        None => (hidden.clone(), None),
    };
    let mut logits = normed.matmul_t_unchecked(&head.readout);
    logits.add_row_vector(&head.readout_bias);
    (logits, HeadCache { normed, norm })
}

/// Backward through readout (and final norm); returns d hidden.
pub(crate) fn head_backward(
    head: &ModelHead,
    g: &mut HeadGradients,
    cache: &HeadCache,
    dlogits: &DenseMatrix,
) -> DenseMatrix {
    for (gb, s) in g.readout_bias.iter_mut().zip(dlogits.column_sums()) {
        *gb += s;
    }
    g.readout.axpy(1.0, &dlogits.t_matmul_unchecked(&cache.normed));
    let dnormed = dlogits.matmul_unchecked(&head.readout);
    match (&head.final_norm, &mut g.final_norm, &cache.norm) {
        (Some(ln), Some(gln), Some(nc)) => {
            super::backward::layer_norm_backward(&dnormed, ln, nc, gln)
        }
        _ => dnormed,
    }
}

pub(crate) fn embed_backward(g: &mut HeadGradients, tokens: &[usize], dx: &DenseMatrix) {
    for (i, &t) in tokens.iter().enumerate() {
        for (o, &v) in g.embedding.row_mut(t).iter_mut().zip(dx.row(i)) {
            *o += v;
        }
    }
}

/// Full forward pass with backward, for end-to-end training of the toy
/// model. Returns `(logits, grad-closure input)`: call with `dlogits` to
/// accumulate gradients.
pub(crate) fn model_forward_backward(
    model: &Model,
    tokens: &[usize],
    grads_head: &mut HeadGradients,
    grads_layers: &mut [LayerWeights],
    dlogits_fn: impl FnOnce(&DenseMatrix) -> DenseMatrix,
) -> Result<DenseMatrix> {
    let cfg = &model.config;
    let mut x = embed(&model.head, cfg, tokens)?;
    let mut caches = Vec::with_capacity(model.layers.len());
    for (i, l) in model.layers.iter().enumerate() {
        let c = forward_cached(l.weights(), cfg, &x, None).map_err(|e| at_layer(e, i))?;
        x = c.out.clone();
        caches.push(c);
    }
    let (logits, hc) = head_forward_cached(&model.head, &x);
    let dlogits = dlogits_fn(&logits);
    let mut dx = head_backward(&model.head, grads_head, &hc, &dlogits);
    for (i, l) in model.layers.iter().enumerate().rev() {
        let (d, _) = backward_from_cache(l.weights(), &mut grads_layers[i], cfg, &caches[i], &dx);
        dx = d;
    }
    embed_backward(grads_head, tokens, &dx);
    Ok(logits)
}

fn at_layer(e: Error, index: usize) -> Error {
    match e {
        Error::Numerical { context, detail } => Error::Numerical {
            context: format!("layer {index}: {context}"),
            detail,
        },
        other => other,
    }
}

/// Embeds `tokens`, runs every layer in order and projects to `n × vocab` logits.
pub fn model_forward<M: LayerStack + ?Sized>(model: &M, tokens: &[usize]) -> Result<DenseMatrix> {
    let cfg = model.config();
    let mut x = embed(model.head(), cfg, tokens)?;
    for i in 0..model.layer_count() {
        x = layer_forward(model.layer(i), cfg, &x, None, false)
            .map_err(|e| at_layer(e, i))?
            .0;
    }
    Ok(head_forward_cached(model.head(), &x).0)
}

/// Hidden states entering every layer, plus the final output (`n_layers + 1` entries).
pub(crate) fn hidden_trajectory<M: LayerStack + ?Sized>(
    model: &M,
    tokens: &[usize],
) -> Result<Vec<DenseMatrix>> {
    let cfg = model.config();
    let mut states = vec![embed(model.head(), cfg, tokens)?];
    for i in 0..model.layer_count() {
        let next = layer_forward(model.layer(i), cfg, states.last().unwrap(), None, false)
            .map_err(|e| at_layer(e, i))?
            .0;
        states.push(next);
    }
    Ok(states)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStatePair {
    pub x_i: DenseMatrix,
    pub x_o: DenseMatrix,
}

/// Captured `{X_i, X_o}` pairs of one layer: the layer's fine-tuning data.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStatePairSet {
    pub layer_index: usize,
    pub d_model: usize,
    pub pairs: Vec<HiddenStatePair>,
    /// Hash of the source checkpoint (empty when captured in memory).
    pub source_hash: String,
    /// Which input distribution produced the samples.
    pub distribution: String,
}

impl HiddenStatePairSet {
    pub fn new(layer_index: usize, d_model: usize, pairs: Vec<HiddenStatePair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Input("hidden-state pair set is empty".into()));
        }
        for (k, p) in pairs.iter().enumerate() {
            if p.x_i.cols() != d_model || p.x_o.cols() != d_model || p.x_i.rows() != p.x_o.rows() {
                return Err(Error::shape(format!(
                    "pair {k}: x_i {:?}, x_o {:?}, expected n×{d_model}",
                    p.x_i.shape(),
                    p.x_o.shape()
                )));
            }
        }
        Ok(Self {
            layer_index,
            d_model,
            pairs,
            source_hash: String::new(),
            distribution: String::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Runs the original model on each input and records the hidden states
/// entering and leaving layer `layer_index`.
pub fn capture_hidden_states(
    model: &Model,
    inputs: &[Vec<usize>],
    layer_index: usize,
) -> Result<HiddenStatePairSet> {
    let mut all = capture_all_layers(model, inputs)?;
    if layer_index >= all.len() {
        return Err(Error::Input(format!(
            "layer index {layer_index} out of range for {} layers",
            all.len()
        )));
    }
    Ok(all.swap_remove(layer_index))
}

/// [`capture_hidden_states`] for every layer in one pass over the inputs.
pub fn capture_all_layers(model: &Model, inputs: &[Vec<usize>]) -> Result<Vec<HiddenStatePairSet>> {
    let n_layers = model.layers.len();
    let mut per_layer: Vec<Vec<HiddenStatePair>> = vec![Vec::with_capacity(inputs.len()); n_layers];
    for tokens in inputs {
        let states = hidden_trajectory(model, tokens)?;
        for (j, bucket) in per_layer.iter_mut().enumerate() {
            bucket.push(HiddenStatePair {
                x_i: states[j].clone(),
                x_o: states[j + 1].clone(),
            });
        }
    }
    per_layer
        .into_iter()
        .enumerate()
        .map(|(j, pairs)| HiddenStatePairSet::new(j, model.config.dims.d_model, pairs))
        .collect()
}
