use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::linalg::DenseMatrix;
use crate::model::{capture_all_layers, ModelDims};
use crate::quant::finetune_layer_quantized;

fn toy(d: usize, heads: usize, dff: usize, layers: usize, seed: u64) -> Model {
    let cfg = ModelConfig::new(ModelDims::new(d, heads, d / heads, dff, layers, 12).unwrap());
    Model::random(cfg, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn inputs(n: usize, len: usize, seed: u64) -> Vec<Vec<usize>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..len).map(|_| rng.random_range(0..12)).collect()).collect()
}

fn quick(mode: TrainMode) -> TrainConfig {
    TrainConfig {
        epochs: 6,
        batch_size: 4,
        adam: AdamConfig {
            learning_rate: 3e-3,
            ..AdamConfig::default()
        },
        mode,
        seed: 11,
        quantize: QuantLevel::None,
    }
}

#[test]
fn exact_factorization_has_zero_objective() {
    let m = toy(16, 4, 24, 1, 1);
    let sets = capture_all_layers(&m, &inputs(5, 6, 2)).unwrap();
    let plan = RankPlan::full_rank(&m.config.dims);
    let c = prepare_layer(&m.layers[0], &m.config, &plan, &TrainConfig::default(), 0).unwrap();
    assert!(layer_objective(&c, &m.config, &sets[0]).unwrap() <= 1e-12);
    assert_eq!(layer_objective(&m.layers[0], &m.config, &sets[0]).unwrap(), 0.0);
}

#[test]
fn objective_matches_per_sample_loop() {
    let m = toy(16, 4, 24, 1, 3);
    let sets = capture_all_layers(&m, &inputs(7, 5, 4)).unwrap();
    let plan = RankPlan::new(&m.config.dims, 2, 1, 6, 1).unwrap();
    let c = prepare_layer(&m.layers[0], &m.config, &plan, &TrainConfig::default(), 0).unwrap();
    let mut total = 0.0;
    for p in &sets[0].pairs {
        let (y, _) = layer_forward(&c, &m.config, &p.x_i, None, false).unwrap();
        for i in 0..y.rows() {
            for j in 0..y.cols() {
                total += (y.get(i, j) - p.x_o.get(i, j)).powi(2);
            }
        }
    }
    let oracle = total / 7.0;
    let got = layer_objective(&c, &m.config, &sets[0]).unwrap();
    assert!((got - oracle).abs() <= 1e-10 * oracle.max(1.0));
}

#[test]
fn zero_layer_on_zero_targets() {
    let m = toy(8, 2, 16, 1, 5);
    let spec = m.layers[0].weights().spec();
    let zero = LayerWeights::zeros(&m.config, &spec);
    let n = Normal::new(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pairs = (0..3)
        .map(|_| HiddenStatePair {
            x_i: DenseMatrix::from_fn(4, 8, |_, _| n.sample(&mut rng)),
            x_o: DenseMatrix::zeros(4, 8),
        })
        .collect();
    let set = HiddenStatePairSet::new(0, 8, pairs).unwrap();
    assert_eq!(layer_objective(&zero, &m.config, &set).unwrap(), 0.0);
}

#[test]
fn training_never_returns_worse_than_init() {
    let m = toy(16, 4, 32, 1, 7);
    let sets = capture_all_layers(&m, &inputs(24, 6, 8)).unwrap();
    let plan = RankPlan::new(&m.config.dims, 2, 1, 6, 1).unwrap();
    for mode in TrainMode::ALL {
        let t = quick(mode);
        let c = prepare_layer(&m.layers[0], &m.config, &plan, &t, 0).unwrap();
        let init = layer_objective(&c, &m.config, &sets[0]).unwrap();
        let (trained, report) = finetune_layer(c, &m.config, &sets[0], &t).unwrap();
        assert_eq!(report.losses.len(), t.epochs + 1);
        assert_eq!(report.initial_loss(), init);
        assert!(report.final_loss() <= init);
        assert_eq!(
            layer_objective(&trained, &m.config, &sets[0]).unwrap(),
            report.final_loss()
        );
        if mode != TrainMode::FrozenSpectral {
            assert!(report.final_loss() < init, "{mode:?} made no progress");
        }
    }
}

#[test]
fn frozen_spectral_is_bit_identical() {
    let m = toy(16, 4, 32, 1, 9);
    let sets = capture_all_layers(&m, &inputs(12, 6, 10)).unwrap();
    let plan = RankPlan::new(&m.config.dims, 2, 1, 6, 1).unwrap();
    let t = quick(TrainMode::FrozenSpectral);
    let c = prepare_layer(&m.layers[0], &m.config, &plan, &t, 0).unwrap();
    let before = c.weights().flatten();
    let classes = c.weights().class_vector();
    let (trained, _) = finetune_layer(c, &m.config, &sets[0], &t).unwrap();
    let after = trained.weights().flatten();
    let mut changed = [0usize; 2];
    for ((b, a), cl) in before.iter().zip(&after).zip(&classes) {
        if *cl == ParamClass::Spectral {
            assert_eq!(b.to_bits(), a.to_bits());
        } else if b != a {
            changed[usize::from(*cl == ParamClass::Lora)] += 1;
        }
    }
    assert!(changed[1] > 0, "LoRA never moved");
}

#[test]
fn spectral_only_mode_reallocates_lora_rank() {
    let plan = RankPlan {
        r_a: 32,
        l_a: 8,
        r_f: 162,
        l_f: 18,
    };
    let p = TrainMode::SpectralOnly.effective_plan(&plan);
    assert_eq!((p.r_a, p.l_a, p.r_f, p.l_f), (40, 0, 180, 0));
    assert_eq!(TrainMode::FrozenSpectral.effective_plan(&plan), plan);
}

#[test]
fn training_is_deterministic() {
    let m = toy(16, 4, 32, 1, 12);
    let sets = capture_all_layers(&m, &inputs(10, 5, 13)).unwrap();
    let plan = RankPlan::new(&m.config.dims, 2, 1, 6, 1).unwrap();
    let t = quick(TrainMode::SpectralLora);
    let run = || {
        let c = prepare_layer(&m.layers[0], &m.config, &plan, &t, 0).unwrap();
        finetune_layer(c, &m.config, &sets[0], &t).unwrap()
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra, rb);
    assert_eq!(a, b);
}

#[test]
fn divergence_is_a_training_error() {
    let m = toy(8, 2, 16, 1, 14);
    let sets = capture_all_layers(&m, &inputs(4, 4, 15)).unwrap();
    let plan = RankPlan::new(&m.config.dims, 2, 1, 4, 1).unwrap();
    let mut t = quick(TrainMode::SpectralLora);
    t.adam.learning_rate = 1e300;
    let c = prepare_layer(&m.layers[0], &m.config, &plan, &t, 0).unwrap();
    match finetune_layer(c, &m.config, &sets[0], &t) {
        Err(Error::Training { layer, epoch, .. }) => {
            assert_eq!(layer, Some(0));
            assert!(epoch >= 1);
        }
        other => panic!("expected a training error, got {other:?}"),
    }
}

#[test]
fn invalid_config_rejected() {
    let mut t = TrainConfig::default();
    t.epochs = 0;
    assert!(t.validate().is_err());
    let mut t = TrainConfig::default();
    t.adam.learning_rate = 0.0;
    assert!(t.validate().is_err());
}

fn grad_setup() -> (Model, HiddenStatePairSet, CompressedLayerParams) {
    let m = toy(8, 2, 16, 1, 16);
    let sets = capture_all_layers(&m, &inputs(3, 4, 17)).unwrap();
    let plan = RankPlan::new(&m.config.dims, 2, 1, 4, 2).unwrap();
    let t = quick(TrainMode::SpectralLora);
    let mut c = prepare_layer(&m.layers[0], &m.config, &plan, &t, 0).unwrap();
    let n = Normal::new(0.0, 0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    c.weights_mut()
        .for_each_param_mut(&mut |p| p.data.iter_mut().for_each(|v| *v += n.sample(&mut rng)));
    (m, sets.into_iter().next().unwrap(), c)
}

#[test]
fn grad_check_passes_for_every_class() {
    let (m, pairs, c) = grad_setup();
    let r = grad_check(&c, &m.config, &pairs, 1e-5, 1e-5).unwrap();
    assert!(r.passed, "{r:?}");
    for class in [ParamClass::Spectral, ParamClass::Lora, ParamClass::Bias, ParamClass::Norm] {
        assert!(r.per_class.contains_key(&class), "{class:?} missing");
    }
    let r2 = grad_check(&c, &m.config, &pairs, 2e-5, 1e-5).unwrap();
    assert_eq!(r.passed, r2.passed);
    assert!((r.max_rel_error - r2.max_rel_error).abs() < 1e-5);
}

#[test]
fn zero_gradient_at_exact_point() {
    let m = toy(8, 2, 16, 1, 19);
    let sets = capture_all_layers(&m, &inputs(3, 4, 20)).unwrap();
    let r = grad_check(&m.layers[0], &m.config, &sets[0], 1e-5, 1e-5).unwrap();
    assert!(r.analytic_norm < 1e-8, "{}", r.analytic_norm);
}

#[test]
fn parallel_equals_sequential() {
    let m = toy(16, 4, 32, 3, 21);
    let sets = capture_all_layers(&m, &inputs(8, 5, 22)).unwrap();
    let ranks = RankPlan::new(&m.config.dims, 2, 1, 6, 1).unwrap();
    let plan = CompressionPlan::uniform(&m.config.dims, ranks, false).unwrap();
    let t = quick(TrainMode::SpectralLora);
    let (a, ra) = finetune_all_layers(&m, &plan, &sets, &t, Schedule::Sequential).unwrap();
    let (b, rb) = finetune_all_layers(&m, &plan, &sets, &t, Schedule::Parallel).unwrap();
    let (c, _) = finetune_all_layers(&m, &plan, &sets, &t, Schedule::Workers(2)).unwrap();
    assert_eq!(ra, rb);
    for i in 0..3 {
        let fa = a.compressed(i).unwrap().layer().weights().flatten();
        let fb = b.compressed(i).unwrap().layer().weights().flatten();
        let fc = c.compressed(i).unwrap().layer().weights().flatten();
        assert!(fa.iter().zip(&fb).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(fa.iter().zip(&fc).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn keep_everything_leaves_model_unchanged() {
    let m = toy(8, 2, 16, 2, 23);
    let sets = capture_all_layers(&m, &inputs(3, 4, 24)).unwrap();
    let plan = CompressionPlan {
        layers: vec![LayerPlan::Keep; 2],
    };
    let (mixed, reports) =
        finetune_all_layers(&m, &plan, &sets, &quick(TrainMode::SpectralLora), Schedule::Parallel)
            .unwrap();
    assert!(reports.is_empty());
    assert_eq!(mixed.source_model(), m);
    assert!(mixed.compressed_slots().iter().all(|s| s.is_none()));
}

#[test]
fn single_layer_plan_is_finetune_layer_plus_assembly() {
    let m = toy(8, 2, 16, 2, 25);
    let sets = capture_all_layers(&m, &inputs(6, 4, 26)).unwrap();
    let ranks = RankPlan::new(&m.config.dims, 2, 1, 4, 1).unwrap();
    let plan = CompressionPlan::selected(&m.config.dims, ranks, false, &[1]).unwrap();
    let t = quick(TrainMode::SpectralLora);
    let (mixed, _) = finetune_all_layers(&m, &plan, &sets, &t, Schedule::Parallel).unwrap();
    let c = prepare_layer(&m.layers[1], &m.config, &ranks, &t, 1).unwrap();
    let (direct, _) = finetune_layer(c, &m.config, &sets[1], &t).unwrap();
    assert_eq!(mixed.compressed(1).unwrap().layer(), &direct);
    assert!(mixed.compressed(0).is_none());
}

#[test]
fn quantization_level_none_is_plain_finetuning() {
    let m = toy(8, 2, 16, 1, 27);
    let sets = capture_all_layers(&m, &inputs(6, 4, 28)).unwrap();
    let ranks = RankPlan::new(&m.config.dims, 2, 1, 4, 1).unwrap();
    let t = quick(TrainMode::SpectralLora);
    let c = prepare_layer(&m.layers[0], &m.config, &ranks, &t, 0).unwrap();
    let (plain, rp) = finetune_layer(c.clone(), &m.config, &sets[0], &t).unwrap();
    let (q, rq) = finetune_layer_quantized(c, &m.config, &sets[0], &t).unwrap();
    assert_eq!(rp, rq);
    let expected = crate::quant::QuantizedLayer::from_layer(&plain, &m.config).unwrap();
    assert_eq!(q, expected);
}

#[test]
fn exported_quantized_layer_matches_training_forward() {
    let m = toy(8, 2, 16, 1, 29);
    let sets = capture_all_layers(&m, &inputs(6, 4, 30)).unwrap();
    let ranks = RankPlan::new(&m.config.dims, 2, 1, 4, 1).unwrap();
    let mut t = quick(TrainMode::SpectralLora);
    t.quantize = QuantLevel::Int8;
    let c = prepare_layer(&m.layers[0], &m.config, &ranks, &t, 0).unwrap();
    let (q, report) = finetune_layer_quantized(c, &m.config, &sets[0], &t).unwrap();
    let obj = layer_objective(&q.layer, &m.config, &sets[0]).unwrap();
    assert_eq!(obj, report.final_loss());
    // Dequantized weights are fixed points of fake quantization.
    assert_eq!(&fake_quantize_layer(q.layer.weights()), q.layer.weights());
}
