use super::forward::{forward_cached, ForwardCache, NormCache};
use super::layer::{LayerNorm, LayerWeights, Linear};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Gradients of a scalar loss through one layer.
#[derive(Debug, Clone)]
pub struct LayerGradients {
    /// Same structure as the layer; every trainable tensor has an entry.
    pub params: LayerWeights,
    pub input: DenseMatrix,
    /// Present when the forward pass used cross-attention.
    pub cross_kv: Option<DenseMatrix>,
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

pub(crate) fn layer_norm_backward(
    dy: &DenseMatrix,
    ln: &LayerNorm,
    cache: &NormCache,
    grad: &mut LayerNorm,
) -> DenseMatrix {
    let (n, d) = dy.shape();
    let mut dx = DenseMatrix::zeros(n, d);
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        for j in 0..d {
            grad.gain[j] += dyr[j] * xh[j];
            grad.bias[j] += dyr[j];
            dxhat[j] = dyr[j] * ln.gain[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = is * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Accumulates weight gradients of `y = x·Wᵀ` into `grad` and returns `dx`.
fn linear_backward(
    lin: &Linear,
    grad: &mut Linear,
    x: &DenseMatrix,
    mid: Option<&DenseMatrix>,
    dy: &DenseMatrix,
) -> DenseMatrix {
    match (lin, grad) {
        (Linear::Dense(w), Linear::Dense(gw)) => {
            gw.axpy(1.0, &dy.t_matmul_unchecked(x));
            dy.matmul_unchecked(w)
        }
        (
            Linear::Factored { left, right, .. },
            Linear::Factored {
                left: gl,
                right: gr,
                ..
            },
        ) => {
            let mid = mid.expect("factored forward caches its inner activation");
            gl.axpy(1.0, &dy.t_matmul_unchecked(mid));
            let dmid = dy.matmul_unchecked(left);
            gr.axpy(1.0, &dmid.t_matmul_unchecked(x));
            dmid.matmul_unchecked(right)
        }
        _ => unreachable!("gradient container mirrors the layer structure"),
    }
}

/// Backward pass through attention. Returns `(d attn_in, d kv)`; the second
/// is `None` for self-attention, where it is already folded into the first.
fn attention_backward(
    w: &LayerWeights,
    g: &mut LayerWeights,
    cfg: &ModelConfig,
    c: &ForwardCache,
    dz: &DenseMatrix,
) -> (DenseMatrix, Option<DenseMatrix>) {
    let attn = &w.attn;
    let heads = cfg.dims.n_heads;
    let inner = attn.layout.inner(cfg.dims.d_head);
    let scale = cfg.softmax_scale();
    let xkv = c.kv.as_ref().unwrap_or(&c.attn_in);
    let (n, m) = (c.attn_in.rows(), xkv.rows());

    if let Some(gb) = &mut g.attn.bo {
        add_into(gb, &dz.column_sums());
    }
    let dctx = dz.matmul_t_unchecked(&attn.wo_t);
    g.attn.wo_t.axpy(1.0, &c.ctx.t_matmul_unchecked(dz));

    let mut dq = DenseMatrix::zeros(n, heads * inner);
    let mut dk = DenseMatrix::zeros(m, heads * inner);
    let mut dv = DenseMatrix::zeros(m, heads * inner);
    let mut dxkv = DenseMatrix::zeros(m, xkv.cols());
    for h in 0..heads {
        let cols = h * inner..(h + 1) * inner;
        let a = &c.probs[h];
        let dch = dctx.col_block(cols.clone());
        let vh = c.v.col_block(cols.clone());
        let qh = c.q.col_block(cols.clone());
        let kh = c.k.col_block(cols);

        let da = dch.matmul_t_unchecked(&vh);
        dv.set_col_block(h * inner, &a.t_matmul_unchecked(&dch));
        let mut ds = DenseMatrix::zeros(n, m);
        for i in 0..n {
            let ar = a.row(i);
            let dar = da.row(i);
            let dot: f64 = ar.iter().zip(dar).map(|(p, q)| p * q).sum();
            for (j, o) in ds.row_mut(i).iter_mut().enumerate() {
                *o = ar[j] * (dar[j] - dot);
            }
        }
        if let (Some(cb), Some(gcb)) = (&attn.qk_bias, &mut g.attn.qk_bias) {
            let col = ds.column_sums();
            let grow = gcb.row_mut(h);
            for (j, &s) in col.iter().enumerate() {
                for (gv, &x) in grow.iter_mut().zip(xkv.row(j)) {
                    *gv += s * x;
                }
                for (dv, &cv) in dxkv.row_mut(j).iter_mut().zip(cb.row(h)) {
                    *dv += s * cv;
                }
            }
        }
        dq.set_col_block(h * inner, &ds.matmul_unchecked(&kh).scale(scale));
        dk.set_col_block(h * inner, &ds.t_matmul_unchecked(&qh).scale(scale));
    }

    g.attn.wq.axpy(1.0, &dq.t_matmul_unchecked(&c.attn_in));
    if let Some(gb) = &mut g.attn.bq {
        add_into(gb, &dq.column_sums());
    }
    let mut d_attn_in = dq.matmul_unchecked(&attn.wq);

    g.attn.wk.axpy(1.0, &dk.t_matmul_unchecked(xkv));
    dxkv.axpy(1.0, &dk.matmul_unchecked(&attn.wk));
    g.attn.wv.axpy(1.0, &dv.t_matmul_unchecked(xkv));
    if let Some(gb) = &mut g.attn.bv {
        add_into(gb, &dv.column_sums());
    }
    dxkv.axpy(1.0, &dv.matmul_unchecked(&attn.wv));

    if c.kv.is_some() {
        (d_attn_in, Some(dxkv))
    } else {
        d_attn_in.axpy(1.0, &dxkv);
        (d_attn_in, None)
    }
}

/// Backward pass from a cached forward. Parameter gradients are added into
/// `g`, which must mirror `w`'s structure.
pub(crate) fn backward_from_cache(
    w: &LayerWeights,
    g: &mut LayerWeights,
    cfg: &ModelConfig,
    c: &ForwardCache,
    upstream: &DenseMatrix,
) -> (DenseMatrix, Option<DenseMatrix>) {
    let pre_ln = cfg.ff_residual_pre_ln;

    if let Some(gb) = &mut g.ff.b2 {
        add_into(gb, &upstream.column_sums());
    }
    let dact = linear_backward(&w.ff.w2, &mut g.ff.w2, &c.ff_act, c.ff2_mid.as_ref(), upstream);
    let mut dpre = dact;
    for (d, &p) in dpre.data_mut().iter_mut().zip(c.ff_pre.data()) {
        *d *= cfg.activation.derivative(p);
    }
    if let Some(gb) = &mut g.ff.b1 {
        add_into(gb, &dpre.column_sums());
    }
    let dff_in = linear_backward(&w.ff.w1, &mut g.ff.w1, &c.ff_in, c.ff1_mid.as_ref(), &dpre);

    let dresid = if pre_ln {
        let ln2 = w.ln2.as_ref().expect("pre-LN layer has ln2");
        let gln2 = g.ln2.as_mut().expect("pre-LN gradient has ln2");
        let mut d = layer_norm_backward(&dff_in, ln2, &c.mid_norm, gln2);
        d.axpy(1.0, upstream);
        d
    } else {
        layer_norm_backward(&dff_in, &w.ln1, &c.mid_norm, &mut g.ln1)
    };

    let (d_attn_in, dkv) = attention_backward(w, g, cfg, c, &dresid);
    let mut dx = dresid;
    if pre_ln {
        let pre = c.pre_norm.as_ref().expect("pre-LN forward caches ln1");
        dx.axpy(1.0, &layer_norm_backward(&d_attn_in, &w.ln1, pre, &mut g.ln1));
    } else {
        dx.axpy(1.0, &d_attn_in);
    }
    (dx, dkv)
}

/// Gradients of `⟨upstream, layer(x)⟩` with respect to every trainable
/// tensor and to the inputs.
pub fn layer_backward<L: AsRef<LayerWeights> + ?Sized>(
    layer: &L,
    cfg: &ModelConfig,
    x: &DenseMatrix,
    cross_kv: Option<&DenseMatrix>,
    upstream: &DenseMatrix,
) -> Result<LayerGradients> {
    let w = layer.as_ref();
    let cache = forward_cached(w, cfg, x, cross_kv)?;
    if upstream.shape() != cache.out.shape() {
        return Err(Error::shape(format!(
            "upstream gradient {:?} does not match layer output {:?}",
            upstream.shape(),
            cache.out.shape()
        )));
    }
    let mut params = w.zeros_like();
    let (input, cross) = backward_from_cache(w, &mut params, cfg, &cache, upstream);
    Ok(LayerGradients {
        params,
        input,
        cross_kv: cross,
    })
}
