use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::compress::RankPlan;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Per-head structure of the attention stacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadLayout {
    /// `k = d_h`, uncompressed.
    Dense,
    /// `k = spectral + lora`; within each head block the spectral rows come first.
    Factored { spectral: usize, lora: usize },
}

impl HeadLayout {
    pub fn inner(&self, d_head: usize) -> usize {
        match *self {
            HeadLayout::Dense => d_head,
            HeadLayout::Factored { spectral, lora } => spectral + lora,
        }
    }
}

/// Structure of one feed-forward weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LinearLayout {
    Dense,
    Factored { spectral: usize, lora: usize },
}

/// Which role a parameter entry plays. Drives freezing and grad-check reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    Dense,
    Spectral,
    Lora,
    Bias,
    Norm,
}

/// Maps a flat entry index inside one tensor to its [`ParamClass`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassMap {
    Uniform(ParamClass),
    /// Rows grouped in blocks of `block`; the first `spectral` rows of each block are spectral.
    HeadRows { block: usize, spectral: usize },
    /// Columns below `spectral` are spectral, the rest LoRA.
    Cols { spectral: usize },
    /// Rows below `spectral` are spectral, the rest LoRA.
    Rows { spectral: usize },
}

impl ClassMap {
    pub fn class_at(&self, index: usize, cols: usize) -> ParamClass {
        let (row, col) = (index / cols.max(1), index % cols.max(1));
        let lora_or = |spectral: bool| {
            if spectral {
                ParamClass::Spectral
            } else {
                ParamClass::Lora
            }
        };
        match *self {
            ClassMap::Uniform(c) => c,
            ClassMap::HeadRows { block, spectral } => lora_or(row % block < spectral),
            ClassMap::Cols { spectral } => lora_or(col < spectral),
            ClassMap::Rows { spectral } => lora_or(row < spectral),
        }
    }
}

pub struct ParamRef<'a> {
    pub name: String,
    /// `[n]` for vectors, `[rows, cols]` for matrices.
    pub dims: Vec<usize>,
    pub data: &'a [f64],
    pub classes: ClassMap,
}

pub struct ParamMut<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a mut [f64],
    pub classes: ClassMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    pub layout: HeadLayout,
    pub wq: DenseMatrix,
    pub wk: DenseMatrix,
    pub wv: DenseMatrix,
    /// `W_Oᵀ`, head-stacked like the others.
    pub wo_t: DenseMatrix,
    pub bq: Option<Vec<f64>>,
    pub bv: Option<Vec<f64>>,
    /// Row `h` is added as `X·c_h` to every logit row of head `h`; this is
    /// where a query bias ends up once `W_K` is factored.
    pub qk_bias: Option<DenseMatrix>,
    pub bo: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Linear {
    /// `d_out × d_in`.
    Dense(DenseMatrix),
    /// Effective weight `left · right` with `left: d_out × k`, `right: k × d_in`;
    /// the first `spectral` inner components come from the SVD, the rest are LoRA.
    Factored {
        left: DenseMatrix,
        right: DenseMatrix,
        spectral: usize,
    },
}

impl Linear {
    pub fn out_dim(&self) -> usize {
        match self {
            Linear::Dense(w) => w.rows(),
            Linear::Factored { left, .. } => left.rows(),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Linear::Dense(w) => w.cols(),
            Linear::Factored { right, .. } => right.cols(),
        }
    }

    pub fn layout(&self) -> LinearLayout {
        match self {
            Linear::Dense(_) => LinearLayout::Dense,
            Linear::Factored { left, spectral, .. } => LinearLayout::Factored {
                spectral: *spectral,
                lora: left.cols() - spectral,
            },
        }
    }

    /// The `d_out × d_in` matrix this linear map applies.
    pub fn effective(&self) -> DenseMatrix {
        match self {
            Linear::Dense(w) => w.clone(),
            Linear::Factored { left, right, .. } => left.matmul_unchecked(right),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Linear::Dense(w) => w.rows() * w.cols(),
            Linear::Factored { left, right, .. } => {
                left.rows() * left.cols() + right.rows() * right.cols()
            }
        }
    }

    fn zeros(layout: LinearLayout, d_out: usize, d_in: usize) -> Self {
        match layout {
            LinearLayout::Dense => Linear::Dense(DenseMatrix::zeros(d_out, d_in)),
            LinearLayout::Factored { spectral, lora } => Linear::Factored {
                left: DenseMatrix::zeros(d_out, spectral + lora),
                right: DenseMatrix::zeros(spectral + lora, d_in),
                spectral,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    /// `d_ff × d`.
    pub w1: Linear,
    pub b1: Option<Vec<f64>>,
    /// `d × d_ff`.
    pub w2: Linear,
    pub b2: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNorm {
    pub fn identity(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }
}

/// Structural description of a [`LayerWeights`], enough to allocate one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub attention: HeadLayout,
    pub w1: LinearLayout,
    pub w2: LinearLayout,
    pub bq: bool,
    pub bv: bool,
    pub qk_bias: bool,
    pub bo: bool,
    pub b1: bool,
    pub b2: bool,
    pub ln2: bool,
}

/// Trainable tensors of one transformer layer, original or factored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub attn: Attention,
    pub ff: FeedForward,
    pub ln1: LayerNorm,
    /// Present only in the pre-LN variant.
    pub ln2: Option<LayerNorm>,
}

fn opt_zeros(present: bool, n: usize) -> Option<Vec<f64>> {
    present.then(|| vec![0.0; n])
}

impl LayerWeights {
    pub fn zeros(cfg: &ModelConfig, spec: &LayerSpec) -> Self {
        let dims = cfg.dims;
        let d = dims.d_model;
        let hk = dims.n_heads * spec.attention.inner(dims.d_head);
        Self {
            attn: Attention {
                layout: spec.attention,
                wq: DenseMatrix::zeros(hk, d),
                wk: DenseMatrix::zeros(hk, d),
                wv: DenseMatrix::zeros(hk, d),
                wo_t: DenseMatrix::zeros(hk, d),
                bq: opt_zeros(spec.bq, hk),
                bv: opt_zeros(spec.bv, hk),
                qk_bias: spec.qk_bias.then(|| DenseMatrix::zeros(dims.n_heads, d)),
                bo: opt_zeros(spec.bo, d),
            },
            ff: FeedForward {
                w1: Linear::zeros(spec.w1, dims.d_ff, d),
                b1: opt_zeros(spec.b1, dims.d_ff),
                w2: Linear::zeros(spec.w2, d, dims.d_ff),
                b2: opt_zeros(spec.b2, d),
            },
            ln1: LayerNorm {
                gain: vec![0.0; d],
                bias: vec![0.0; d],
            },
            ln2: spec.ln2.then(|| LayerNorm {
                gain: vec![0.0; d],
                bias: vec![0.0; d],
            }),
        }
    }

    pub fn spec(&self) -> LayerSpec {
        LayerSpec {
            attention: self.attn.layout,
            w1: self.ff.w1.layout(),
            w2: self.ff.w2.layout(),
            bq: self.attn.bq.is_some(),
            bv: self.attn.bv.is_some(),
            qk_bias: self.attn.qk_bias.is_some(),
            bo: self.attn.bo.is_some(),
            b1: self.ff.b1.is_some(),
            b2: self.ff.b2.is_some(),
            ln2: self.ln2.is_some(),
        }
    }

    /// Same structure, all entries zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_param_mut(&mut |p| p.data.fill(0.0));
        z
    }

    /// Checks every tensor shape against `cfg`.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let dims = cfg.dims;
        let d = dims.d_model;
        let inner = self.attn.layout.inner(dims.d_head);
        let hk = dims.n_heads * inner;
        let bad = |what: &str, got: String| {
            Err(Error::shape(format!("layer tensor {what} has shape {got}")))
        };
        if let HeadLayout::Factored { spectral, lora } = self.attn.layout {
            if spectral + lora == 0 {
                return Err(Error::shape("factored attention with zero inner width"));
            }
        }
        for (name, m) in [
            ("wq", &self.attn.wq),
            ("wk", &self.attn.wk),
            ("wv", &self.attn.wv),
            ("wo_t", &self.attn.wo_t),
        ] {
            if m.shape() != (hk, d) {
                return bad(name, format!("{:?}, expected ({hk}, {d})", m.shape()));
            }
        }
        for (name, v, n) in [
            ("bq", &self.attn.bq, hk),
            ("bv", &self.attn.bv, hk),
            ("bo", &self.attn.bo, d),
            ("b1", &self.ff.b1, dims.d_ff),
            ("b2", &self.ff.b2, d),
        ] {
            if let Some(v) = v {
                if v.len() != n {
                    return bad(name, format!("[{}], expected [{n}]", v.len()));
                }
            }
        }
        if let Some(c) = &self.attn.qk_bias {
            if c.shape() != (dims.n_heads, d) {
                return bad("qk_bias", format!("{:?}", c.shape()));
            }
        }
        for (name, lin, o, i) in [
            ("w1", &self.ff.w1, dims.d_ff, d),
            ("w2", &self.ff.w2, d, dims.d_ff),
        ] {
            if lin.out_dim() != o || lin.in_dim() != i {
                return bad(name, format!("{}x{}", lin.out_dim(), lin.in_dim()));
            }
            if let Linear::Factored {
                left,
                right,
                spectral,
            } = lin
            {
                if left.cols() != right.rows() || *spectral > left.cols() {
                    return bad(name, "inconsistent factor widths".into());
                }
            }
        }
        for ln in std::iter::once(&self.ln1).chain(self.ln2.as_ref()) {
            if ln.gain.len() != d || ln.bias.len() != d {
                return bad("layer norm", format!("[{}]", ln.gain.len()));
            }
        }
        if self.ln2.is_some() != cfg.ff_residual_pre_ln {
            return Err(Error::shape(
                "second layer norm must be present exactly in the pre-LN variant",
            ));
        }
        Ok(())
    }

    pub fn for_each_param(&self, f: &mut dyn FnMut(ParamRef<'_>)) {
        let attn_classes = match self.attn.layout {
            HeadLayout::Dense => ClassMap::Uniform(ParamClass::Dense),
            HeadLayout::Factored { spectral, lora } => ClassMap::HeadRows {
                block: spectral + lora,
                spectral,
            },
        };
        fn mat<'a>(name: &str, m: &'a DenseMatrix, classes: ClassMap) -> ParamRef<'a> {
            ParamRef {
                name: name.to_string(),
                dims: vec![m.rows(), m.cols()],
                data: m.data(),
                classes,
            }
        }
        fn vector<'a>(name: &str, v: &'a [f64], class: ParamClass) -> ParamRef<'a> {
            ParamRef {
                name: name.to_string(),
                dims: vec![v.len()],
                data: v,
                classes: ClassMap::Uniform(class),
            }
        }
        f(mat("attn.wq", &self.attn.wq, attn_classes));
        f(mat("attn.wk", &self.attn.wk, attn_classes));
        f(mat("attn.wv", &self.attn.wv, attn_classes));
        f(mat("attn.wo_t", &self.attn.wo_t, attn_classes));
        if let Some(b) = &self.attn.bq {
            f(vector("attn.bq", b, ParamClass::Bias));
        }
        if let Some(b) = &self.attn.bv {
            f(vector("attn.bv", b, ParamClass::Bias));
        }
        if let Some(c) = &self.attn.qk_bias {
            f(mat("attn.qk_bias", c, ClassMap::Uniform(ParamClass::Bias)));
        }
        if let Some(b) = &self.attn.bo {
            f(vector("attn.bo", b, ParamClass::Bias));
        }
        for (name, lin, bias) in [
            ("ff.w1", &self.ff.w1, &self.ff.b1),
            ("ff.w2", &self.ff.w2, &self.ff.b2),
        ] {
            match lin {
                Linear::Dense(w) => f(mat(name, w, ClassMap::Uniform(ParamClass::Dense))),
                Linear::Factored {
                    left,
                    right,
                    spectral,
                } => {
                    f(mat(
                        &format!("{name}.left"),
                        left,
                        ClassMap::Cols { spectral: *spectral },
                    ));
                    f(mat(
                        &format!("{name}.right"),
                        right,
                        ClassMap::Rows { spectral: *spectral },
                    ));
                }
            }
            if let Some(b) = bias {
                let bname = name.replace(".w", ".b");
                f(vector(&bname, b, ParamClass::Bias));
            }
        }
        f(vector("ln1.gain", &self.ln1.gain, ParamClass::Norm));
        f(vector("ln1.bias", &self.ln1.bias, ParamClass::Norm));
        if let Some(ln) = &self.ln2 {
            f(vector("ln2.gain", &ln.gain, ParamClass::Norm));
            f(vector("ln2.bias", &ln.bias, ParamClass::Norm));
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
        let attn_classes = match self.attn.layout {
            HeadLayout::Dense => ClassMap::Uniform(ParamClass::Dense),
            HeadLayout::Factored { spectral, lora } => ClassMap::HeadRows {
                block: spectral + lora,
                spectral,
            },
        };
        fn mat<'a>(name: &str, m: &'a mut DenseMatrix, classes: ClassMap) -> ParamMut<'a> {
            let dims = vec![m.rows(), m.cols()];
            ParamMut {
                name: name.to_string(),
                dims,
                data: m.data_mut(),
                classes,
            }
        }
        fn vector<'a>(name: &str, v: &'a mut [f64], class: ParamClass) -> ParamMut<'a> {
            ParamMut {
                name: name.to_string(),
                dims: vec![v.len()],
                data: v,
                classes: ClassMap::Uniform(class),
            }
        }
        f(mat("attn.wq", &mut self.attn.wq, attn_classes));
        f(mat("attn.wk", &mut self.attn.wk, attn_classes));
        f(mat("attn.wv", &mut self.attn.wv, attn_classes));
        f(mat("attn.wo_t", &mut self.attn.wo_t, attn_classes));
        if let Some(b) = &mut self.attn.bq {
            f(vector("attn.bq", b, ParamClass::Bias));
        }
        if let Some(b) = &mut self.attn.bv {
            f(vector("attn.bv", b, ParamClass::Bias));
        }
        if let Some(c) = &mut self.attn.qk_bias {
            f(mat("attn.qk_bias", c, ClassMap::Uniform(ParamClass::Bias)));
        }
        if let Some(b) = &mut self.attn.bo {
            f(vector("attn.bo", b, ParamClass::Bias));
        }
        for (name, lin, bias) in [
            ("ff.w1", &mut self.ff.w1, &mut self.ff.b1),
            ("ff.w2", &mut self.ff.w2, &mut self.ff.b2),
        ] {
            match lin {
                Linear::Dense(w) => f(mat(name, w, ClassMap::Uniform(ParamClass::Dense))),
                Linear::Factored {
                    left,
                    right,
                    spectral,
                } => {
                    let s = *spectral;
                    f(mat(&format!("{name}.left"), left, ClassMap::Cols { spectral: s }));
                    f(mat(&format!("{name}.right"), right, ClassMap::Rows { spectral: s }));
                }
            }
            if let Some(b) = bias {
                let bname = name.replace(".w", ".b");
                f(vector(&bname, b, ParamClass::Bias));
            }
        }
        f(vector("ln1.gain", &mut self.ln1.gain, ParamClass::Norm));
        f(vector("ln1.bias", &mut self.ln1.bias, ParamClass::Norm));
        if let Some(ln) = &mut self.ln2 {
            f(vector("ln2.gain", &mut ln.gain, ParamClass::Norm));
            f(vector("ln2.bias", &mut ln.bias, ParamClass::Norm));
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |p| n += p.data.len());
        n
    }

    /// All entries concatenated in visiting order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.for_each_param(&mut |p| out.extend_from_slice(p.data));
        out
    }

    /// Class of every entry, aligned with [`flatten`](Self::flatten).
    pub fn class_vector(&self) -> Vec<ParamClass> {
        let mut out = Vec::with_capacity(self.param_count());
        self.for_each_param(&mut |p| {
            let cols = *p.dims.last().unwrap_or(&1);
            out.extend((0..p.data.len()).map(|i| p.classes.class_at(i, cols)));
        });
        out
    }

    /// Inverse of [`flatten`](Self::flatten). Panics on length mismatch.
    pub fn load_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.for_each_param_mut(&mut |p| {
            let n = p.data.len();
            p.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_param(&mut |p| ok &= p.data.iter().all(|x| x.is_finite()));
        ok
    }

    /// Weights in the attention projections (excluding biases).
    pub fn attention_weight_count(&self) -> usize {
        4 * self.attn.wq.rows() * self.attn.wq.cols()
    }

    /// Weights in the feed-forward projections (excluding biases).
    pub fn ff_weight_count(&self) -> usize {
        self.ff.w1.param_count() + self.ff.w2.param_count()
    }
}

impl AsRef<LayerWeights> for LayerWeights {
    fn as_ref(&self) -> &LayerWeights {
        self
    }
}

/// An uncompressed layer: dense `d × d` attention stacks and dense FF weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    weights: LayerWeights,
}

impl LayerParams {
    pub fn new(weights: LayerWeights, cfg: &ModelConfig) -> Result<Self> {
        weights.validate(cfg)?;
        if weights.attn.layout != HeadLayout::Dense
            || weights.ff.w1.layout() != LinearLayout::Dense
            || weights.ff.w2.layout() != LinearLayout::Dense
            || weights.attn.qk_bias.is_some()
        {
            return Err(Error::shape("original layer params must be dense"));
        }
        Ok(Self { weights })
    }

    /// Gaussian initialisation with `1/√fan_in` scaling; optional small biases.
    pub fn random(cfg: &ModelConfig, biases: bool, rng: &mut impl Rng) -> Self {
        let dims = cfg.dims;
        let d = dims.d_model;
        let gauss = |rng: &mut dyn rand::RngCore, rows, cols, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            DenseMatrix::from_fn(rows, cols, |_, _| normal.sample(rng))
        };
        let vec_gauss = |rng: &mut dyn rand::RngCore, n: usize, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| normal.sample(rng)).collect::<Vec<f64>>()
        };
        let wstd = 1.0 / (d as f64).sqrt();
        let bstd = 0.05;
        let attn = Attention {
            layout: HeadLayout::Dense,
            wq: gauss(rng, d, d, wstd),
            wk: gauss(rng, d, d, wstd),
            wv: gauss(rng, d, d, wstd),
            wo_t: gauss(rng, d, d, wstd),
            bq: biases.then(|| vec_gauss(rng, d, bstd)),
            bv: biases.then(|| vec_gauss(rng, d, bstd)),
            qk_bias: None,
            bo: biases.then(|| vec_gauss(rng, d, bstd)),
        };
        let ff = FeedForward {
            w1: Linear::Dense(gauss(rng, dims.d_ff, d, wstd)),
            b1: biases.then(|| vec_gauss(rng, dims.d_ff, bstd)),
            w2: Linear::Dense(gauss(rng, d, dims.d_ff, 1.0 / (dims.d_ff as f64).sqrt())),
            b2: biases.then(|| vec_gauss(rng, d, bstd)),
        };
        Self {
            weights: LayerWeights {
                attn,
                ff,
                ln1: LayerNorm::identity(d),
                ln2: cfg.ff_residual_pre_ln.then(|| LayerNorm::identity(d)),
            },
        }
    }

    pub fn weights(&self) -> &LayerWeights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut LayerWeights {
        &mut self.weights
    }

    pub fn into_weights(self) -> LayerWeights {
        self.weights
    }

    /// Per-head slice `W_{Q_h}` (`d_h × d`).
    pub fn head_query(&self, h: usize, d_head: usize) -> DenseMatrix {
        self.weights.attn.wq.row_block(h * d_head..(h + 1) * d_head)
    }

    pub fn head_key(&self, h: usize, d_head: usize) -> DenseMatrix {
        self.weights.attn.wk.row_block(h * d_head..(h + 1) * d_head)
    }

    pub fn head_value(&self, h: usize, d_head: usize) -> DenseMatrix {
        self.weights.attn.wv.row_block(h * d_head..(h + 1) * d_head)
    }

    /// `W_{O_h}ᵀ` (`d_h × d`): columns `h·d_h..(h+1)·d_h` of `W_O`, transposed.
    pub fn head_output_t(&self, h: usize, d_head: usize) -> DenseMatrix {
        self.weights.attn.wo_t.row_block(h * d_head..(h + 1) * d_head)
    }
}

impl AsRef<LayerWeights> for LayerParams {
    fn as_ref(&self) -> &LayerWeights {
        &self.weights
    }
}

/// A layer whose projections were replaced by spectral + LoRA factors.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedLayerParams {
    weights: LayerWeights,
    plan: RankPlan,
}

impl CompressedLayerParams {
    pub fn new(weights: LayerWeights, plan: RankPlan, cfg: &ModelConfig) -> Result<Self> {
        weights.validate(cfg)?;
        if !matches!(weights.attn.layout, HeadLayout::Factored { .. }) {
            return Err(Error::shape("compressed layer needs factored attention"));
        }
        Ok(Self { weights, plan })
    }

    pub fn plan(&self) -> &RankPlan {
        &self.plan
    }

    pub fn weights(&self) -> &LayerWeights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut LayerWeights {
        &mut self.weights
    }

    pub fn into_weights(self) -> LayerWeights {
        self.weights
    }

    /// Whether every LoRA `B` block (key/output side and FF `right` rows) is zero.
    pub fn lora_b_is_zero(&self) -> bool {
        let w = &self.weights;
        let HeadLayout::Factored { spectral, lora } = w.attn.layout else {
            return true;
        };
        let block = spectral + lora;
        let attn_ok = [&w.attn.wk, &w.attn.wo_t].iter().all(|m| {
            (0..m.rows())
                .filter(|r| r % block >= spectral)
                .all(|r| m.row(r).iter().all(|&x| x == 0.0))
        });
        let ff_ok = [&w.ff.w1, &w.ff.w2].iter().all(|lin| match lin {
            Linear::Dense(_) => true,
            Linear::Factored {
                right, spectral, ..
            } => (*spectral..right.rows()).all(|r| right.row(r).iter().all(|&x| x == 0.0)),
        });
        attn_ok && ff_ok
    }
}

impl AsRef<LayerWeights> for CompressedLayerParams {
    fn as_ref(&self) -> &LayerWeights {
        &self.weights
    }
}
