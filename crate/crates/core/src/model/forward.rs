use super::layer::{Attention, LayerNorm, LayerWeights, Linear};
use super::{ModelConfig, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Per-head intermediates of one attention pass.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub queries: Vec<DenseMatrix>,
    pub keys: Vec<DenseMatrix>,
    pub values: Vec<DenseMatrix>,
    /// Row-stochastic attention probabilities `A_h`.
    pub probs: Vec<DenseMatrix>,
    pub context: Vec<DenseMatrix>,
    /// Attention output after the output projection.
    pub z: DenseMatrix,
    /// Normalised input of the feed-forward block.
    pub z_prime: DenseMatrix,
}

#[derive(Debug, Clone)]
pub(crate) struct NormCache {
    pub xhat: DenseMatrix,
    pub inv_std: Vec<f64>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) attn_in: DenseMatrix,
    pub(crate) pre_norm: Option<NormCache>,
    pub(crate) kv: Option<DenseMatrix>,
    pub(crate) q: DenseMatrix,
    pub(crate) k: DenseMatrix,
    pub(crate) v: DenseMatrix,
    pub(crate) probs: Vec<DenseMatrix>,
    pub(crate) ctx: DenseMatrix,
    pub(crate) z: DenseMatrix,
    pub(crate) mid_norm: NormCache,
    pub(crate) ff_in: DenseMatrix,
    pub(crate) ff1_mid: Option<DenseMatrix>,
    pub(crate) ff_pre: DenseMatrix,
    pub(crate) ff_act: DenseMatrix,
    pub(crate) ff2_mid: Option<DenseMatrix>,
    pub out: DenseMatrix,
}

pub(crate) fn layer_norm_forward(x: &DenseMatrix, ln: &LayerNorm) -> (DenseMatrix, NormCache) {
    let (n, d) = x.shape();
    let mut xhat = DenseMatrix::zeros(n, d);
    let mut y = DenseMatrix::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(i);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        let yr = y.row_mut(i);
        for j in 0..d {
            yr[j] = ln.gain[j] * xhat.get(i, j) + ln.bias[j];
        }
    }
    (y, NormCache { xhat, inv_std })
}

/// `y = x · Wᵀ`; for factored weights also returns `x · rightᵀ`.
pub(crate) fn linear_forward(lin: &Linear, x: &DenseMatrix) -> (DenseMatrix, Option<DenseMatrix>) {
    match lin {
        Linear::Dense(w) => (x.matmul_t_unchecked(w), None),
        Linear::Factored { left, right, .. } => {
            let mid = x.matmul_t_unchecked(right);
            (mid.matmul_t_unchecked(left), Some(mid))
        }
    }
}

fn softmax_rows(s: &mut DenseMatrix) {
    for i in 0..s.rows() {
        let row = s.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = if *x == f64::NEG_INFINITY {
                0.0
            } else {
                (*x - max).exp()
            };
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

pub(crate) struct AttentionOut {
    pub q: DenseMatrix,
    pub k: DenseMatrix,
    pub v: DenseMatrix,
    pub probs: Vec<DenseMatrix>,
    pub ctx: DenseMatrix,
    pub z: DenseMatrix,
}

pub(crate) fn attention_forward(
    attn: &Attention,
    cfg: &ModelConfig,
    xq: &DenseMatrix,
    xkv: &DenseMatrix,
    causal: bool,
) -> AttentionOut {
    let heads = cfg.dims.n_heads;
    let inner = attn.layout.inner(cfg.dims.d_head);
    let scale = cfg.softmax_scale();
    let n = xq.rows();

    let mut q = xq.matmul_t_unchecked(&attn.wq);
    if let Some(b) = &attn.bq {
        q.add_row_vector(b);
    }
    let k = xkv.matmul_t_unchecked(&attn.wk);
    let mut v = xkv.matmul_t_unchecked(&attn.wv);
    if let Some(b) = &attn.bv {
        v.add_row_vector(b);
    }
    // X_kv · c_hᵀ for every head at once: m × H
    let key_bias = attn.qk_bias.as_ref().map(|c| xkv.matmul_t_unchecked(c));

    let mut ctx = DenseMatrix::zeros(n, heads * inner);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * inner..(h + 1) * inner;
        let qh = q.col_block(cols.clone());
        let kh = k.col_block(cols.clone());
        let vh = v.col_block(cols);
        let mut s = qh.matmul_t_unchecked(&kh);
        for i in 0..n {
            let row = s.row_mut(i);
            for (j, x) in row.iter_mut().enumerate() {
                *x *= scale;
                if let Some(kb) = &key_bias {
                    *x += kb.get(j, h);
                }
                if causal && j > i {
                    *x = f64::NEG_INFINITY;
                }
            }
        }
        softmax_rows(&mut s);
        let ch = s.matmul_unchecked(&vh);
        ctx.set_col_block(h * inner, &ch);
        probs.push(s);
    }
    let mut z = ctx.matmul_unchecked(&attn.wo_t);
    if let Some(b) = &attn.bo {
        z.add_row_vector(b);
    }
    AttentionOut {
        q,
        k,
        v,
        probs,
        ctx,
        z,
    }
}

fn check_input(cfg: &ModelConfig, x: &DenseMatrix, cross_kv: Option<&DenseMatrix>) -> Result<()> {
    let d = cfg.dims.d_model;
    if x.cols() != d || x.rows() == 0 {
        return Err(Error::shape(format!(
            "layer input is {}x{}, expected n×{d} with n ≥ 1",
            x.rows(),
            x.cols()
        )));
    }
    if let Some(c) = cross_kv {
        if c.cols() != d || c.rows() == 0 {
            return Err(Error::shape(format!(
                "cross-attention input is {}x{}, expected m×{d}",
                c.rows(),
                c.cols()
            )));
        }
    }
    Ok(())
}

/// Forward pass keeping every intermediate for [`super::layer_backward`].
pub(crate) fn forward_cached(
    w: &LayerWeights,
    cfg: &ModelConfig,
    x: &DenseMatrix,
    cross_kv: Option<&DenseMatrix>,
) -> Result<ForwardCache> {
    check_input(cfg, x, cross_kv)?;
    let pre_ln = cfg.ff_residual_pre_ln;

    let (attn_in, pre_norm) = if pre_ln {
        let (y, c) = layer_norm_forward(x, &w.ln1);
        (y, Some(c))
    } else {
        (x.clone(), None)
    };
    let kv_src = cross_kv.unwrap_or(&attn_in);
    let causal = cfg.causal && cross_kv.is_none();
    let a = attention_forward(&w.attn, cfg, &attn_in, kv_src, causal);
    if !a.z.is_finite() {
        return Err(Error::numerical("layer attention", "non-finite attention output"));
    }

    let mut resid = a.z.clone();
    resid.axpy(1.0, x);
    let norm = if pre_ln {
        w.ln2.as_ref().expect("validated: pre-LN layer has ln2")
    } else {
        &w.ln1
    };
    let (ff_in, mid_norm) = layer_norm_forward(&resid, norm);

    let (mut ff_pre, ff1_mid) = linear_forward(&w.ff.w1, &ff_in);
    if let Some(b) = &w.ff.b1 {
        ff_pre.add_row_vector(b);
    }
    let ff_act = ff_pre.map(|v| cfg.activation.apply(v));
    let (mut out, ff2_mid) = linear_forward(&w.ff.w2, &ff_act);
    if let Some(b) = &w.ff.b2 {
        out.add_row_vector(b);
    }
    if pre_ln {
        out.axpy(1.0, &resid);
    }
    if !out.is_finite() {
        return Err(Error::numerical("layer feed-forward", "non-finite layer output"));
    }

    Ok(ForwardCache {
        attn_in,
        pre_norm,
        kv: cross_kv.cloned(),
        q: a.q,
        k: a.k,
        v: a.v,
        probs: a.probs,
        ctx: a.ctx,
        z: a.z,
        mid_norm,
        ff_in,
        ff1_mid,
        ff_pre,
        ff_act,
        ff2_mid,
        out,
    })
}

/// One transformer layer applied to an `n × d` hidden state.
///
/// `cross_kv`, when given, supplies keys and values (cross-attention); causal
/// masking from `cfg` applies to self-attention only. With `trace` set the
/// per-head attention intermediates are returned as well.
pub fn layer_forward<L: AsRef<LayerWeights> + ?Sized>(
    layer: &L,
    cfg: &ModelConfig,
    x: &DenseMatrix,
    cross_kv: Option<&DenseMatrix>,
    trace: bool,
) -> Result<(DenseMatrix, Option<AttentionTrace>)> {
    let c = forward_cached(layer.as_ref(), cfg, x, cross_kv)?;
    let trace = trace.then(|| {
        let inner = c.q.cols() / cfg.dims.n_heads;
        let split = |m: &DenseMatrix| {
            (0..cfg.dims.n_heads)
                .map(|h| m.col_block(h * inner..(h + 1) * inner))
                .collect::<Vec<_>>()
        };
        AttentionTrace {
            queries: split(&c.q),
            keys: split(&c.k),
            values: split(&c.v),
            probs: c.probs.clone(),
            context: split(&c.ctx),
            z: c.z.clone(),
            z_prime: c.ff_in.clone(),
        }
    });
    Ok((c.out, trace))
}

/// [`layer_forward`] over a batch of sequences.
pub fn layer_forward_batch<L: AsRef<LayerWeights> + ?Sized>(
    layer: &L,
    cfg: &ModelConfig,
    batch: &[DenseMatrix],
) -> Result<Vec<DenseMatrix>> {
    batch
        .iter()
        .map(|x| layer_forward(layer, cfg, x, None, false).map(|(y, _)| y))
        .collect()
}
