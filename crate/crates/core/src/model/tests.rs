use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::compress::{compress_layer, FactorInit, RankPlan};
use crate::linalg::{svd, DenseMatrix};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian(rows: usize, cols: usize, g: &mut ChaCha8Rng) -> DenseMatrix {
    let n = Normal::new(0.0, 1.0).unwrap();
    DenseMatrix::from_fn(rows, cols, |_, _| n.sample(g))
}

fn cfg(d: usize, h: usize, dff: usize, pre_ln: bool, causal: bool) -> ModelConfig {
    let mut c = ModelConfig::new(ModelDims::new(d, h, d / h, dff, 2, 7).unwrap());
    c.ff_residual_pre_ln = pre_ln;
    c.causal = causal;
    c
}

fn max_abs_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Perturbs every LayerNorm parameter so norm gradients are exercised.
fn jitter_norms(w: &mut LayerWeights, g: &mut ChaCha8Rng) {
    let n = Normal::new(0.0, 0.2).unwrap();
    for ln in std::iter::once(&mut w.ln1).chain(w.ln2.as_mut()) {
        ln.gain.iter_mut().for_each(|x| *x += n.sample(g));
        ln.bias.iter_mut().for_each(|x| *x += n.sample(g));
    }
}

// ---- naive reference, written with explicit loops only ----

fn naive_norm(x: &[f64], ln: &LayerNorm) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
    x.iter()
        .enumerate()
        .map(|(j, v)| ln.gain[j] * (v - mean) / (var + LAYER_NORM_EPS).sqrt() + ln.bias[j])
        .collect()
}

fn naive_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

fn naive_mat_vec(w: &DenseMatrix, x: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    (0..w.rows())
        .map(|r| {
            let mut s = b.map_or(0.0, |b| b[r]);
            for c in 0..w.cols() {
                s += w.get(r, c) * x[c];
            }
            s
        })
        .collect()
}

fn naive_attention(
    a: &Attention,
    dims: &ModelDims,
    xq: &[Vec<f64>],
    xkv: &[Vec<f64>],
    causal: bool,
) -> Vec<Vec<f64>> {
    let dh = dims.d_head;
    let d = dims.d_model;
    let mut z: Vec<Vec<f64>> = xq
        .iter()
        .map(|_| a.bo.clone().unwrap_or_else(|| vec![0.0; d]))
        .collect();
    for h in 0..dims.n_heads {
        let rows = h * dh..(h + 1) * dh;
        let proj = |w: &DenseMatrix, b: &Option<Vec<f64>>, x: &[f64]| -> Vec<f64> {
            rows.clone()
                .map(|r| {
                    let mut s = b.as_ref().map_or(0.0, |b| b[r]);
                    for c in 0..d {
                        s += w.get(r, c) * x[c];
                    }
                    s
                })
                .collect()
        };
        for (i, xi) in xq.iter().enumerate() {
            let q = proj(&a.wq, &a.bq, xi);
            let mut logits = Vec::new();
            for (j, xj) in xkv.iter().enumerate() {
                let k = proj(&a.wk, &None, xj);
                let mut s = 0.0;
                for t in 0..dh {
                    s += q[t] * k[t];
                }
                s /= (dh as f64).sqrt();
                logits.push(if causal && j > i { f64::NEG_INFINITY } else { s });
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = e.iter().sum();
            let mut ctx = vec![0.0; dh];
            for (j, xj) in xkv.iter().enumerate() {
                let v = proj(&a.wv, &a.bv, xj);
                for t in 0..dh {
                    ctx[t] += e[j] / total * v[t];
                }
            }
            for o in 0..d {
                for t in 0..dh {
                    z[i][o] += a.wo_t.get(h * dh + t, o) * ctx[t];
                }
            }
        }
    }
    z
}

fn naive_ff(w: &LayerWeights, x: &[f64]) -> Vec<f64> {
    let w1 = w.ff.w1.effective();
    let w2 = w.ff.w2.effective();
    let hidden: Vec<f64> = naive_mat_vec(&w1, x, w.ff.b1.as_deref())
        .into_iter()
        .map(naive_gelu)
        .collect();
    naive_mat_vec(&w2, &hidden, w.ff.b2.as_deref())
}

fn naive_layer(
    w: &LayerWeights,
    c: &ModelConfig,
    x: &DenseMatrix,
    kv: Option<&DenseMatrix>,
) -> DenseMatrix {
    let rows = |m: &DenseMatrix| (0..m.rows()).map(|i| m.row(i).to_vec()).collect::<Vec<_>>();
    let xs = rows(x);
    let attn_in: Vec<Vec<f64>> = if c.ff_residual_pre_ln {
        xs.iter().map(|r| naive_norm(r, &w.ln1)).collect()
    } else {
        xs.clone()
    };
    let kv_rows = kv.map(rows).unwrap_or_else(|| attn_in.clone());
    let z = naive_attention(&w.attn, &c.dims, &attn_in, &kv_rows, c.causal && kv.is_none());
    let mut out = Vec::new();
    for i in 0..xs.len() {
        let resid: Vec<f64> = xs[i].iter().zip(&z[i]).map(|(a, b)| a + b).collect();
        if c.ff_residual_pre_ln {
            let f = naive_ff(w, &naive_norm(&resid, w.ln2.as_ref().unwrap()));
            out.push(resid.iter().zip(f).map(|(a, b)| a + b).collect::<Vec<_>>());
        } else {
            out.push(naive_ff(w, &naive_norm(&resid, &w.ln1)));
        }
    }
    DenseMatrix::from_rows(&out).unwrap()
}

#[test]
fn zero_weights_give_zero_output() {
    let c = cfg(8, 2, 16, false, false);
    let spec = LayerParams::random(&c, true, &mut rng(0)).weights().spec();
    let w = LayerWeights::zeros(&c, &spec);
    let x = gaussian(5, 8, &mut rng(1));
    let (y, _) = layer_forward(&w, &c, &x, None, false).unwrap();
    assert!(y.is_zero());
}

#[test]
fn single_token_attends_to_itself() {
    let c = cfg(8, 2, 16, false, false);
    let l = LayerParams::random(&c, true, &mut rng(2));
    let x = gaussian(1, 8, &mut rng(3));
    let (_, t) = layer_forward(&l, &c, &x, None, true).unwrap();
    for p in t.unwrap().probs {
        assert_eq!(p.shape(), (1, 1));
        assert_eq!(p.get(0, 0), 1.0);
    }
}

#[test]
fn forward_matches_naive_loops() {
    for (pre_ln, causal, cross) in [
        (false, false, false),
        (true, false, false),
        (false, true, false),
        (true, true, false),
        (false, false, true),
        (true, true, true),
    ] {
        let c = cfg(12, 3, 20, pre_ln, causal);
        let mut g = rng(4);
        let mut l = LayerParams::random(&c, true, &mut g);
        jitter_norms(l.weights_mut(), &mut g);
        let x = gaussian(5, 12, &mut g);
        let kv = cross.then(|| gaussian(7, 12, &mut g));
        let (y, _) = layer_forward(&l, &c, &x, kv.as_ref(), false).unwrap();
        let y_ref = naive_layer(l.weights(), &c, &x, kv.as_ref());
        let diff = max_abs_diff(&y, &y_ref);
        assert!(diff < 1e-10, "pre_ln={pre_ln} causal={causal} cross={cross}: {diff}");
    }
}

#[test]
fn attention_rows_are_distributions() {
    let c = cfg(16, 4, 24, false, true);
    let mut g = rng(5);
    let l = LayerParams::random(&c, true, &mut g);
    let plan = RankPlan::new(&c.dims, 2, 1, 8, 2).unwrap();
    let cl = compress_layer(&l, &c, &plan, FactorInit::Spectral, &mut g).unwrap();
    let x = gaussian(6, 16, &mut g).scale(3.0);
    for w in [l.weights(), cl.weights()] {
        let (_, t) = layer_forward(w, &c, &x, None, true).unwrap();
        for p in t.unwrap().probs {
            for i in 0..p.rows() {
                let s: f64 = p.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(p.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}

/// Orthogonal times a positive diagonal, and its inverse.
fn invertible_pair(n: usize, g: &mut ChaCha8Rng) -> (DenseMatrix, DenseMatrix) {
    let q = svd(&gaussian(n, n, g)).unwrap().u;
    let diag: Vec<f64> = (0..n).map(|i| 0.5 + i as f64 * 0.3).collect();
    let r = DenseMatrix::from_fn(n, n, |i, j| q.get(i, j) * diag[j]);
    let r_inv = DenseMatrix::from_fn(n, n, |i, j| q.get(j, i) / diag[i]);
    (r, r_inv)
}

#[test]
fn exact_refactorization_leaves_attention_unchanged() {
    let c = cfg(16, 4, 24, false, false);
    let dh = 4;
    let mut g = rng(6);
    let l = LayerParams::random(&c, false, &mut g);
    let mut w = l.weights().clone();
    for h in 0..4 {
        let rows = h * dh..(h + 1) * dh;
        // W_Qᵀ W_K = (W_Qᵀ R)(R⁻¹ W_K), so W_Q' = Rᵀ W_Q and W_K' = R⁻¹ W_K.
        let (r, r_inv) = invertible_pair(dh, &mut g);
        let wq = r.t_matmul(&w.attn.wq.row_block(rows.clone())).unwrap();
        let wk = r_inv.matmul(&w.attn.wk.row_block(rows.clone())).unwrap();
        w.attn.wq.set_row_block(h * dh, &wq);
        w.attn.wk.set_row_block(h * dh, &wk);
        let (r, r_inv) = invertible_pair(dh, &mut g);
        let wv = r.t_matmul(&w.attn.wv.row_block(rows.clone())).unwrap();
        let wo = r_inv.matmul(&w.attn.wo_t.row_block(rows)).unwrap();
        w.attn.wv.set_row_block(h * dh, &wv);
        w.attn.wo_t.set_row_block(h * dh, &wo);
    }
    let x = gaussian(6, 16, &mut g);
    let (_, t0) = layer_forward(&l, &c, &x, None, true).unwrap();
    let (_, t1) = layer_forward(&w, &c, &x, None, true).unwrap();
    let (t0, t1) = (t0.unwrap(), t1.unwrap());
    for h in 0..4 {
        assert!(max_abs_diff(&t0.probs[h], &t1.probs[h]) < 1e-9);
    }
    assert!(max_abs_diff(&t0.z, &t1.z) < 1e-9);
}

// ---- finite-difference check of the analytic backward ----

fn objective(w: &LayerWeights, c: &ModelConfig, x: &DenseMatrix, kv: Option<&DenseMatrix>, u: &DenseMatrix) -> f64 {
    let (y, _) = layer_forward(w, c, x, kv, false).unwrap();
    y.data().iter().zip(u.data()).map(|(a, b)| a * b).sum()
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

fn check_gradients(w: &LayerWeights, c: &ModelConfig, x: &DenseMatrix, kv: Option<&DenseMatrix>, g: &mut ChaCha8Rng) {
    let h = 1e-5;
    let u = gaussian(x.rows(), x.cols(), g);
    let grads = layer_backward(w, c, x, kv, &u).unwrap();
    let analytic = grads.params.flatten();
    let base = w.flatten();
    let mut probe = w.clone();
    let mut worst = 0.0f64;
    for k in 0..base.len() {
        let mut p = base.clone();
        p[k] += h;
        probe.load_flat(&p);
        let plus = objective(&probe, c, x, kv, &u);
        p[k] -= 2.0 * h;
        probe.load_flat(&p);
        let minus = objective(&probe, c, x, kv, &u);
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(rel_error(analytic[k], numeric));
    }
    assert!(worst < 1e-5, "parameter gradient rel error {worst}");

    for (input, grad, is_kv) in [(x, &grads.input, false)]
        .into_iter()
        .chain(kv.zip(grads.cross_kv.as_ref()).map(|(k, g)| (k, g, true)))
    {
        for idx in 0..input.data().len() {
            let mut xp = input.clone();
            xp.data_mut()[idx] += h;
            let mut xm = input.clone();
            xm.data_mut()[idx] -= h;
            let (fp, fm) = if is_kv {
                (objective(w, c, x, Some(&xp), &u), objective(w, c, x, Some(&xm), &u))
            } else {
                (objective(w, c, &xp, kv, &u), objective(w, c, &xm, kv, &u))
            };
            let numeric = (fp - fm) / (2.0 * h);
            let e = rel_error(grad.data()[idx], numeric);
            assert!(e < 1e-5, "input gradient rel error {e} (kv = {is_kv})");
        }
    }
}

#[test]
fn dense_backward_matches_finite_differences() {
    for (pre_ln, causal, cross) in [
        (false, false, false),
        (true, false, false),
        (false, true, true),
        (true, true, true),
    ] {
        let c = cfg(8, 2, 16, pre_ln, causal);
        let mut g = rng(7);
        let mut l = LayerParams::random(&c, true, &mut g);
        jitter_norms(l.weights_mut(), &mut g);
        let x = gaussian(4, 8, &mut g);
        let kv = cross.then(|| gaussian(3, 8, &mut g));
        check_gradients(l.weights(), &c, &x, kv.as_ref(), &mut g);
    }
}

#[test]
fn compressed_backward_matches_finite_differences() {
    for pre_ln in [false, true] {
        let c = cfg(8, 2, 16, pre_ln, false);
        let mut g = rng(8);
        let l = LayerParams::random(&c, true, &mut g);
        let plan = RankPlan::new(&c.dims, 2, 1, 4, 2).unwrap();
        let mut cl = compress_layer(&l, &c, &plan, FactorInit::Spectral, &mut g).unwrap();
        // Move off the zero-B point so every factor contributes.
        let n = Normal::new(0.0, 0.1).unwrap();
        cl.weights_mut()
            .for_each_param_mut(&mut |p| p.data.iter_mut().for_each(|v| *v += n.sample(&mut g)));
        let x = gaussian(4, 8, &mut g);
        check_gradients(cl.weights(), &c, &x, None, &mut g);
    }
}

#[test]
fn lora_b_gradient_at_zero_init() {
    let c = cfg(8, 2, 16, false, false);
    let mut g = rng(9);
    let l = LayerParams::random(&c, true, &mut g);
    let plan = RankPlan::new(&c.dims, 2, 1, 4, 2).unwrap();
    let cl = compress_layer(&l, &c, &plan, FactorInit::Spectral, &mut g).unwrap();
    assert!(cl.lora_b_is_zero());
    let x = gaussian(4, 8, &mut g);
    check_gradients(cl.weights(), &c, &x, None, &mut g);

    let u = gaussian(4, 8, &mut g);
    let grads = layer_backward(&cl, &c, &x, None, &u).unwrap();
    let classes = cl.weights().class_vector();
    let mut b_grad = 0.0;
    let mut names = Vec::new();
    grads.params.for_each_param(&mut |p| names.push((p.name.clone(), p.data.to_vec(), p.classes, p.dims.clone())));
    for (name, data, classes_map, dims) in names {
        let cols = *dims.last().unwrap();
        let is_b_side = name == "attn.wk" || name == "attn.wo_t" || name.ends_with(".right");
        if !is_b_side {
            continue;
        }
        for (i, v) in data.iter().enumerate() {
            if classes_map.class_at(i, cols) == ParamClass::Lora {
                b_grad += v * v;
            }
        }
    }
    assert!(classes.contains(&ParamClass::Lora));
    assert!(b_grad.sqrt() > 1e-6, "LoRA-B gradient vanished: {b_grad}");
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let c = cfg(8, 2, 16, true, false);
    let l = LayerParams::random(&c, true, &mut rng(10));
    let x = gaussian(3, 8, &mut rng(11));
    let grads = layer_backward(&l, &c, &x, None, &DenseMatrix::zeros(3, 8)).unwrap();
    assert!(grads.params.flatten().iter().all(|&v| v == 0.0));
    assert!(grads.input.is_zero());
}

#[test]
fn shape_errors() {
    let c = cfg(8, 2, 16, false, false);
    let l = LayerParams::random(&c, false, &mut rng(12));
    assert!(matches!(
        layer_forward(&l, &c, &DenseMatrix::zeros(3, 7), None, false),
        Err(crate::Error::Shape(_))
    ));
    assert!(matches!(
        layer_forward(&l, &c, &DenseMatrix::zeros(3, 8), Some(&DenseMatrix::zeros(2, 4)), false),
        Err(crate::Error::Shape(_))
    ));
    assert!(ModelDims::new(10, 3, 3, 4, 1, 2).is_err());
}

#[test]
fn non_finite_output_is_reported() {
    let c = cfg(8, 2, 16, false, false);
    let mut l = LayerParams::random(&c, false, &mut rng(13));
    l.weights_mut().ff.b2 = Some(vec![f64::INFINITY; 8]);
    let x = gaussian(2, 8, &mut rng(14));
    assert!(matches!(
        layer_forward(&l, &c, &x, None, false),
        Err(crate::Error::Numerical { .. })
    ));
}

// ---- model-level ----

fn small_model(n_layers: usize, pre_ln: bool, seed: u64) -> Model {
    let mut c = ModelConfig::new(ModelDims::new(8, 2, 4, 12, n_layers, 6).unwrap());
    c.ff_residual_pre_ln = pre_ln;
    Model::random(c, true, &mut rng(seed)).unwrap()
}

#[test]
fn zero_layer_model_is_readout_of_embedding() {
    let m = small_model(0, false, 15);
    let tokens = [1, 4, 0];
    let logits = model_forward(&m, &tokens).unwrap();
    let pos = sinusoidal_positions(3, 8);
    for (i, &t) in tokens.iter().enumerate() {
        for v in 0..6 {
            let mut s = m.head.readout_bias[v];
            for j in 0..8 {
                s += m.head.readout.get(v, j) * (m.head.embedding.get(t, j) + pos.get(i, j));
            }
            assert!((logits.get(i, v) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn model_forward_is_layer_composition() {
    for pre_ln in [false, true] {
        let m = small_model(3, pre_ln, 16);
        let tokens = [2, 3, 5, 1];
        let logits = model_forward(&m, &tokens).unwrap();
        let mut x = sinusoidal_positions(4, 8);
        for (i, &t) in tokens.iter().enumerate() {
            for (o, &e) in x.row_mut(i).iter_mut().zip(m.head.embedding.row(t)) {
                *o += e;
            }
        }
        for l in &m.layers {
            x = layer_forward(l, &m.config, &x, None, false).unwrap().0;
        }
        if let Some(ln) = &m.head.final_norm {
            let rows: Vec<Vec<f64>> = (0..4).map(|i| naive_norm(x.row(i), ln)).collect();
            x = DenseMatrix::from_rows(&rows).unwrap();
        }
        let mut expected = x.matmul_t(&m.head.readout).unwrap();
        expected.add_row_vector(&m.head.readout_bias);
        assert!(max_abs_diff(&logits, &expected) < 1e-12);
    }
}

#[test]
fn identical_layer_copy_is_bit_identical() {
    let m = small_model(2, false, 17);
    let mut m2 = m.clone();
    m2.layers[1] = LayerParams::new(m.layers[1].weights().clone(), &m.config).unwrap();
    let a = model_forward(&m, &[0, 1, 2]).unwrap();
    let b = model_forward(&m2, &[0, 1, 2]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unknown_token_is_an_input_error() {
    let m = small_model(1, false, 18);
    assert!(matches!(model_forward(&m, &[0, 6]), Err(crate::Error::Input(_))));
    assert!(matches!(model_forward(&m, &[]), Err(crate::Error::Input(_))));
}

#[test]
fn capture_pairs_are_consistent() {
    let m = small_model(2, false, 19);
    let inputs = vec![vec![0, 1, 2], vec![3, 4], vec![5, 5, 1, 0]];
    let s0 = capture_hidden_states(&m, &inputs, 0).unwrap();
    let s1 = capture_hidden_states(&m, &inputs, 1).unwrap();
    assert_eq!(s0.len(), 3);
    assert_eq!(s1.layer_index, 1);
    for (a, b) in s0.pairs.iter().zip(&s1.pairs) {
        assert_eq!(a.x_o, b.x_i);
        let (y, _) = layer_forward(&m.layers[0], &m.config, &a.x_i, None, false).unwrap();
        assert_eq!(y, a.x_o);
    }
    assert!(capture_hidden_states(&m, &inputs, 2).is_err());
}

#[test]
fn model_backward_matches_finite_differences() {
    let m = small_model(2, true, 20);
    let tokens = [1, 2, 3];
    let u = gaussian(3, 6, &mut rng(21));
    let f = |m: &Model| -> f64 {
        let l = model_forward(m, &tokens).unwrap();
        l.data().iter().zip(u.data()).map(|(a, b)| a * b).sum()
    };
    let mut gh = m.head.zeros_like();
    let mut gl: Vec<LayerWeights> = m.layers.iter().map(|l| l.weights().zeros_like()).collect();
    model_forward_backward(&m, &tokens, &mut gh, &mut gl, |_| u.clone()).unwrap();
    let h = 1e-5;
    // Head tensors.
    let n_head = gh.tensors().len();
    for t in 0..n_head {
        let len = gh.tensors()[t].2.len();
        for k in 0..len {
            let mut mp = m.clone();
            mp.head.tensors_mut()[t].1[k] += h;
            let mut mm = m.clone();
            mm.head.tensors_mut()[t].1[k] -= h;
            let numeric = (f(&mp) - f(&mm)) / (2.0 * h);
            let e = rel_error(gh.tensors()[t].2[k], numeric);
            assert!(e < 1e-5, "head tensor {t} entry {k}: {e}");
        }
    }
    // First layer parameters.
    let base = m.layers[0].weights().flatten();
    let analytic = gl[0].flatten();
    for k in 0..base.len() {
        let mut p = base.clone();
        p[k] += h;
        let mut mp = m.clone();
        mp.layers[0].weights_mut().load_flat(&p);
        p[k] -= 2.0 * h;
        let mut mm = m.clone();
        mm.layers[0].weights_mut().load_flat(&p);
        let numeric = (f(&mp) - f(&mm)) / (2.0 * h);
        assert!(rel_error(analytic[k], numeric) < 1e-5);
    }
}
