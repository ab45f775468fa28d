use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::RankPlan;
use crate::error::{Error, Result};
use crate::linalg::{svd, truncate, DenseMatrix};
use crate::model::{
    Attention, CompressedLayerParams, FeedForward, HeadLayout, LayerParams, LayerWeights, Linear,
    ModelConfig,
};

/// How the factors of a compressed layer start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FactorInit {
    /// Truncated SVD of each product plus LoRA columns (`A` Gaussian, `B` zero).
    #[default]
    Spectral,
    /// No SVD prior: every factor of total width `r + l` is Gaussian with std `1/√d`.
    Scratch,
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> DenseMatrix {
    let normal = Normal::new(0.0, std).expect("positive std");
    DenseMatrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

fn check_ranks(what: &str, r: usize, l: usize, cap: usize) -> Result<()> {
    if r == 0 || r + l > cap {
        return Err(Error::Plan(format!(
            "{what}: need 1 ≤ r and r + l ≤ {cap}, got r = {r}, l = {l}"
        )));
    }
    Ok(())
}

/// `(U_rΣ_r^½, Σ_r^½V_rᵀ)` of `p·q`.
fn spectral_pair(p: &DenseMatrix, q: &DenseMatrix, r: usize) -> Result<(DenseMatrix, DenseMatrix)> {
    let m = p.matmul(q)?;
    truncate(&svd(&m)?, r)
}

fn widen(
    (us, vs): (DenseMatrix, DenseMatrix),
    a: Option<DenseMatrix>,
    l: usize,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let Some(a) = a else {
        return Ok((us, vs));
    };
    let b = DenseMatrix::zeros(l, vs.cols());
    Ok((DenseMatrix::hstack(&[&us, &a])?, DenseMatrix::vstack(&[&vs, &b])?))
}

/// Replaces a product twin `p·q` (`p: d×k`, `q: k×d′`) with
/// `p′ = [U_rΣ_r^½ | A]`, `q′ = [Σ_r^½V_rᵀ ; 0]`.
///
/// `A` is `d × l` with entries drawn from `N(0, 1/d)`.
pub fn twin_factor(
    p: &DenseMatrix,
    q: &DenseMatrix,
    r: usize,
    l: usize,
    rng: &mut impl Rng,
) -> Result<(DenseMatrix, DenseMatrix)> {
    if p.cols() != q.rows() {
        return Err(Error::shape(format!(
            "twin factors {:?} and {:?} do not chain",
            p.shape(),
            q.shape()
        )));
    }
    check_ranks("twin factor", r, l, p.cols())?;
    let a = (l > 0).then(|| gaussian(p.rows(), l, 1.0 / (p.rows() as f64).sqrt(), rng));
    widen(spectral_pair(p, q, r)?, a, l)
}

/// Spectral and LoRA factors of one feed-forward weight: effective weight `u·v + a·b`.
#[derive(Debug, Clone, PartialEq)]
pub struct FfFactors {
    /// `d_out × r`.
    pub u: DenseMatrix,
    /// `r × d_in`.
    pub v: DenseMatrix,
    /// `d_out × l`.
    pub a: DenseMatrix,
    /// `l × d_in`, zero at construction.
    pub b: DenseMatrix,
}

impl FfFactors {
    pub fn effective(&self) -> DenseMatrix {
        let mut w = self.u.matmul_unchecked(&self.v);
        if self.a.cols() > 0 {
            w.axpy(1.0, &self.a.matmul_unchecked(&self.b));
        }
        w
    }

    pub fn into_linear(self) -> Linear {
        let spectral = self.u.cols();
        let (left, right) = if self.a.cols() == 0 {
            (self.u, self.v)
        } else {
            (
                DenseMatrix::hstack(&[&self.u, &self.a]).expect("same row count"),
                DenseMatrix::vstack(&[&self.v, &self.b]).expect("same column count"),
            )
        };
        Linear::Factored {
            left,
            right,
            spectral,
        }
    }
}

/// Rank-`r` SVD factors of `w` plus an `l`-wide LoRA pair (`a ~ N(0, lora_std²)`, `b = 0`).
pub fn compress_ff(
    w: &DenseMatrix,
    r: usize,
    l: usize,
    lora_std: f64,
    rng: &mut impl Rng,
) -> Result<FfFactors> {
    check_ranks("feed-forward factor", r, l, w.rows().min(w.cols()))?;
    let (u, v) = truncate(&svd(w)?, r)?;
    let a = if l > 0 {
        gaussian(w.rows(), l, lora_std, rng)
    } else {
        DenseMatrix::zeros(w.rows(), 0)
    };
    Ok(FfFactors {
        u,
        v,
        a,
        b: DenseMatrix::zeros(l, w.cols()),
    })
}

/// Factors every head's `(W_{Q_h}ᵀ, W_{K_h})` and `(W_{V_h}ᵀ, W_{O_h}ᵀ)` jointly
/// and restacks the results into `H·(r_a + l_a)`-row matrices.
///
/// Biases cannot stay where they were once the projections are factored.
/// The value bias moves into the output bias (`b_o + W_O b_v`, exact because
/// attention rows sum to one); the query bias becomes a per-head key-side
/// logit term `c_h = W_{K_h}ᵀ b_{q_h} / √d_h`.
pub fn compress_attention(
    layer: &LayerParams,
    cfg: &ModelConfig,
    plan: &RankPlan,
    init: FactorInit,
    rng: &mut impl Rng,
) -> Result<Attention> {
    let dims = cfg.dims;
    let (dh, d, heads) = (dims.d_head, dims.d_model, dims.n_heads);
    let (r, l) = (plan.r_a, plan.l_a);
    check_ranks("attention", r, l, dh)?;
    let k = r + l;
    let lora_std = 1.0 / (d as f64).sqrt();

    // Random draws happen up front, in head order, so the result does not
    // depend on how the per-head SVDs are scheduled.
    let draws: Vec<[Option<DenseMatrix>; 4]> = (0..heads)
        .map(|_| match init {
            FactorInit::Spectral => [
                (l > 0).then(|| gaussian(d, l, lora_std, rng)),
                (l > 0).then(|| gaussian(d, l, lora_std, rng)),
                None,
                None,
            ],
            FactorInit::Scratch => [
                Some(gaussian(k, d, lora_std, rng)),
                Some(gaussian(k, d, lora_std, rng)),
                Some(gaussian(k, d, lora_std, rng)),
                Some(gaussian(k, d, lora_std, rng)),
            ],
        })
        .collect();

    let blocks: Vec<[DenseMatrix; 4]> = draws
        .into_par_iter()
        .enumerate()
        .map(|(h, draw)| -> Result<[DenseMatrix; 4]> {
            if let [Some(q), Some(kk), Some(v), Some(o)] = draw {
                return Ok([q, kk, v, o]);
            }
            let [aq, av, _, _] = draw;
            let (pq, qk) = widen(
                spectral_pair(&layer.head_query(h, dh).transpose(), &layer.head_key(h, dh), r)?,
                aq,
                l,
            )?;
            let (pv, qo) = widen(
                spectral_pair(
                    &layer.head_value(h, dh).transpose(),
                    &layer.head_output_t(h, dh),
                    r,
                )?,
                av,
                l,
            )?;
            Ok([pq.transpose(), qk, pv.transpose(), qo])
        })
        .collect::<Result<_>>()?;

    let stack = |i: usize| {
        let parts: Vec<&DenseMatrix> = blocks.iter().map(|b| &b[i]).collect();
        DenseMatrix::vstack(&parts)
    };
    let src = &layer.weights().attn;

    let qk_bias = match &src.bq {
        Some(bq) => {
            let scale = cfg.softmax_scale();
            let mut c = DenseMatrix::zeros(heads, d);
            for h in 0..heads {
                let row = c.row_mut(h);
                for i in h * dh..(h + 1) * dh {
                    for (o, &w) in row.iter_mut().zip(src.wk.row(i)) {
                        *o += scale * bq[i] * w;
                    }
                }
            }
            Some(c)
        }
        None => None,
    };
    let bo = match (&src.bo, &src.bv) {
        (bo, Some(bv)) => {
            let mut out = bo.clone().unwrap_or_else(|| vec![0.0; d]);
            for (i, &b) in bv.iter().enumerate() {
                for (o, &w) in out.iter_mut().zip(src.wo_t.row(i)) {
                    *o += b * w;
                }
            }
            Some(out)
        }
        (bo, None) => bo.clone(),
    };

    let layout = match init {
        FactorInit::Spectral => HeadLayout::Factored { spectral: r, lora: l },
        FactorInit::Scratch => HeadLayout::Factored {
            spectral: 0,
            lora: k,
        },
    };
    Ok(Attention {
        layout,
        wq: stack(0)?,
        wk: stack(1)?,
        wv: stack(2)?,
        wo_t: stack(3)?,
        bq: None,
        bv: None,
        qk_bias,
        bo,
    })
}

fn factor_linear(
    w: &Linear,
    r: usize,
    l: usize,
    d_model: usize,
    init: FactorInit,
    rng: &mut impl Rng,
) -> Result<Linear> {
    let Linear::Dense(w) = w else {
        return Err(Error::shape("feed-forward weight is already factored"));
    };
    let std = 1.0 / (d_model as f64).sqrt();
    match init {
        FactorInit::Spectral => Ok(compress_ff(w, r, l, std, rng)?.into_linear()),
        FactorInit::Scratch => {
            check_ranks("feed-forward factor", r, l, w.rows().min(w.cols()))?;
            Ok(Linear::Factored {
                left: gaussian(w.rows(), r + l, std, rng),
                right: gaussian(r + l, w.cols(), std, rng),
                spectral: 0,
            })
        }
    }
}

/// Compresses one original layer under `plan`. Norms and FF biases are copied.
pub fn compress_layer(
    layer: &LayerParams,
    cfg: &ModelConfig,
    plan: &RankPlan,
    init: FactorInit,
    rng: &mut impl Rng,
) -> Result<CompressedLayerParams> {
    plan.validate(&cfg.dims)?;
    let attn = compress_attention(layer, cfg, plan, init, rng)?;
    let src = layer.weights();
    let d = cfg.dims.d_model;
    let ff = FeedForward {
        w1: factor_linear(&src.ff.w1, plan.r_f, plan.l_f, d, init, rng)?,
        b1: src.ff.b1.clone(),
        w2: factor_linear(&src.ff.w2, plan.r_f, plan.l_f, d, init, rng)?,
        b2: src.ff.b2.clone(),
    };
    let weights = LayerWeights {
        attn,
        ff,
        ln1: src.ln1.clone(),
        ln2: src.ln2.clone(),
    };
    CompressedLayerParams::new(weights, *plan, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::fro_norm;
    use crate::model::{layer_forward, ModelDims};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rel_err(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        fro_norm(&a.sub(b).unwrap()) / fro_norm(b).max(1e-300)
    }

    fn small_cfg(pre_ln: bool) -> ModelConfig {
        let mut cfg = ModelConfig::new(ModelDims::new(16, 4, 4, 24, 1, 8).unwrap());
        cfg.ff_residual_pre_ln = pre_ln;
        cfg
    }

    #[test]
    fn full_rank_twin_is_exact() {
        let mut g = rng(1);
        let p = gaussian(12, 4, 1.0, &mut g);
        let q = gaussian(4, 9, 1.0, &mut g);
        let (p2, q2) = twin_factor(&p, &q, 4, 0, &mut g).unwrap();
        assert!(rel_err(&p2.matmul(&q2).unwrap(), &p.matmul(&q).unwrap()) < 1e-10);
    }

    #[test]
    fn lora_columns_do_not_change_the_product() {
        let mut g = rng(2);
        let p = gaussian(10, 6, 1.0, &mut g);
        let q = gaussian(6, 7, 1.0, &mut g);
        let (p2, q2) = twin_factor(&p, &q, 3, 2, &mut g).unwrap();
        assert_eq!(p2.shape(), (10, 5));
        assert_eq!(q2.shape(), (5, 7));
        assert!(q2.row_block(3..5).is_zero());
        assert!(!p2.col_block(3..5).is_zero());
        let (ps, qs) = spectral_pair(&p, &q, 3).unwrap();
        assert!(rel_err(&p2.matmul(&q2).unwrap(), &ps.matmul(&qs).unwrap()) < 1e-12);
    }

    #[test]
    fn rank_bounds_are_plan_errors() {
        let mut g = rng(3);
        let p = gaussian(8, 4, 1.0, &mut g);
        let q = gaussian(4, 8, 1.0, &mut g);
        assert!(matches!(twin_factor(&p, &q, 4, 1, &mut g), Err(Error::Plan(_))));
        assert!(matches!(twin_factor(&p, &q, 0, 1, &mut g), Err(Error::Plan(_))));
        let w = gaussian(5, 7, 1.0, &mut g);
        assert!(matches!(compress_ff(&w, 5, 1, 0.1, &mut g), Err(Error::Plan(_))));
    }

    #[test]
    fn joint_truncation_beats_independent() {
        let mut g = rng(4);
        let p = gaussian(16, 4, 1.0, &mut g);
        let q = gaussian(4, 16, 1.0, &mut g);
        let m = p.matmul(&q).unwrap();
        let (p2, q2) = twin_factor(&p, &q, 2, 0, &mut g).unwrap();
        let joint = fro_norm(&m.sub(&p2.matmul(&q2).unwrap()).unwrap());
        let tp = svd(&p).unwrap().reconstruct(2);
        let tq = svd(&q).unwrap().reconstruct(2);
        let indep = fro_norm(&m.sub(&tp.matmul(&tq).unwrap()).unwrap());
        assert!(joint <= indep + 1e-12, "{joint} > {indep}");
    }

    #[test]
    fn ff_truncation_error_is_tail_energy() {
        let mut g = rng(5);
        let w = gaussian(32, 64, 1.0, &mut g);
        let f = compress_ff(&w, 8, 0, 0.1, &mut g).unwrap();
        let err = fro_norm(&w.sub(&f.effective()).unwrap());
        let s = svd(&w).unwrap();
        let tail: f64 = s.sigma[8..].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((err - tail).abs() < 1e-9 * tail);
    }

    #[test]
    fn ff_full_rank_is_exact_and_lora_neutral() {
        let mut g = rng(6);
        let w = gaussian(6, 9, 1.0, &mut g);
        let f = compress_ff(&w, 6, 0, 0.1, &mut g).unwrap();
        assert!(rel_err(&f.effective(), &w) < 1e-10);
        let f = compress_ff(&w, 3, 2, 0.1, &mut g).unwrap();
        let lin = f.clone().into_linear();
        assert!(rel_err(&lin.effective(), &f.effective()) < 1e-14);
        let spectral = f.u.matmul(&f.v).unwrap();
        assert!(rel_err(&f.effective(), &spectral) < 1e-14);
    }

    #[test]
    fn full_rank_layer_matches_original() {
        for pre_ln in [false, true] {
            let cfg = small_cfg(pre_ln);
            let mut g = rng(7);
            let layer = LayerParams::random(&cfg, true, &mut g);
            let plan = RankPlan::full_rank(&cfg.dims);
            let c = compress_layer(&layer, &cfg, &plan, FactorInit::Spectral, &mut g).unwrap();
            let x = gaussian(5, 16, 1.0, &mut g);
            let (y0, _) = layer_forward(&layer, &cfg, &x, None, false).unwrap();
            let (y1, _) = layer_forward(&c, &cfg, &x, None, false).unwrap();
            assert!(rel_err(&y1, &y0) < 1e-8, "pre_ln = {pre_ln}");
        }
    }

    #[test]
    fn full_rank_cross_attention_with_biases_matches() {
        let cfg = small_cfg(false);
        let mut g = rng(8);
        let layer = LayerParams::random(&cfg, true, &mut g);
        let plan = RankPlan::full_rank(&cfg.dims);
        let c = compress_layer(&layer, &cfg, &plan, FactorInit::Spectral, &mut g).unwrap();
        let x = gaussian(3, 16, 1.0, &mut g);
        let kv = gaussian(6, 16, 1.0, &mut g);
        let (y0, _) = layer_forward(&layer, &cfg, &x, Some(&kv), false).unwrap();
        let (y1, _) = layer_forward(&c, &cfg, &x, Some(&kv), false).unwrap();
        assert!(rel_err(&y1, &y0) < 1e-8);
    }

    #[test]
    fn compressed_probs_match_truncated_logit_oracle() {
        let cfg = small_cfg(false);
        let dims = cfg.dims;
        let mut g = rng(9);
        let layer = LayerParams::random(&cfg, false, &mut g);
        let plan = RankPlan::new(&dims, 2, 0, 8, 0).unwrap();
        let c = compress_layer(&layer, &cfg, &plan, FactorInit::Spectral, &mut g).unwrap();
        let x = gaussian(6, 16, 1.0, &mut g);
        let (_, trace) = layer_forward(&c, &cfg, &x, None, true).unwrap();
        let trace = trace.unwrap();
        for h in 0..dims.n_heads {
            let m = layer
                .head_query(h, 4)
                .transpose()
                .matmul(&layer.head_key(h, 4))
                .unwrap();
            let mt = svd(&m).unwrap().reconstruct(2);
            let logits = x.matmul(&mt).unwrap().matmul_t(&x).unwrap().scale(0.5);
            for i in 0..6 {
                let row = logits.row(i);
                let max = row.iter().copied().fold(f64::MIN, f64::max);
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                for j in 0..6 {
                    let p = (row[j] - max).exp() / z;
                    assert!((trace.probs[h].get(i, j) - p).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn zero_init_output_equals_pure_spectral_layer() {
        let cfg = small_cfg(false);
        let dims = cfg.dims;
        let mut g = rng(10);
        let layer = LayerParams::random(&cfg, true, &mut g);
        let with = RankPlan::new(&dims, 2, 1, 8, 2).unwrap();
        let c = compress_layer(&layer, &cfg, &with, FactorInit::Spectral, &mut g).unwrap();
        assert!(c.lora_b_is_zero());
        let without = RankPlan::new(&dims, 2, 0, 8, 0).unwrap();
        let s = compress_layer(&layer, &cfg, &without, FactorInit::Spectral, &mut g).unwrap();
        let x = gaussian(4, 16, 1.0, &mut g);
        let (y1, _) = layer_forward(&c, &cfg, &x, None, false).unwrap();
        let (y2, _) = layer_forward(&s, &cfg, &x, None, false).unwrap();
        assert!(rel_err(&y1, &y2) < 1e-10);
    }

    #[test]
    fn restacking_round_trip() {
        let mut g = rng(11);
        let m = gaussian(12, 5, 1.0, &mut g);
        let blocks: Vec<DenseMatrix> = (0..4).map(|h| m.row_block(h * 3..(h + 1) * 3)).collect();
        let refs: Vec<&DenseMatrix> = blocks.iter().collect();
        assert_eq!(DenseMatrix::vstack(&refs).unwrap(), m);
    }

    #[test]
    fn scratch_init_has_no_zero_blocks() {
        let cfg = small_cfg(false);
        let mut g = rng(12);
        let layer = LayerParams::random(&cfg, false, &mut g);
        let plan = RankPlan::new(&cfg.dims, 2, 1, 8, 1).unwrap();
        let c = compress_layer(&layer, &cfg, &plan, FactorInit::Scratch, &mut g).unwrap();
        let w = c.weights();
        assert_eq!(w.attn.wq.shape(), (12, 16));
        assert!(!w.attn.wk.is_zero() && !w.attn.wo_t.is_zero());
        assert!(!c.lora_b_is_zero());
    }

    #[test]
    fn compression_is_deterministic() {
        let cfg = small_cfg(false);
        let layer = LayerParams::random(&cfg, true, &mut rng(13));
        let plan = RankPlan::new(&cfg.dims, 2, 1, 8, 2).unwrap();
        let a = compress_layer(&layer, &cfg, &plan, FactorInit::Spectral, &mut rng(14)).unwrap();
        let b = compress_layer(&layer, &cfg, &plan, FactorInit::Spectral, &mut rng(14)).unwrap();
        assert_eq!(a, b);
    }
}
