#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

use beamsel::neural::{
    loss_and_grad, predict, top1, train, Activation, ExtractorSpec, Example, LayerSpec, Modality, ModelSpec, Parameters,
    Tensor, TrainConfig, TrainData, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_spec() -> ModelSpec {
    let ext = |modality, input_shape: Vec<usize>, hidden| ExtractorSpec {
        modality,
        input_shape,
        layers: vec![LayerSpec::new(hidden, Activation::Relu), LayerSpec::new(4, Activation::Tanh)],
    };
    ModelSpec {
        latent_dim: 4,
        extractors: vec![ext(Modality::Gps, vec![2], 3), ext(Modality::Lidar, vec![2, 2, 2], 5)],
        fusion_layers: vec![LayerSpec::new(4, Activation::Relu), LayerSpec::new(4, Activation::Linear)],
        class_count: 4,
    }
}

fn examples(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Example {
            inputs: vec![
                Tensor::vector((0..2).map(|_| rng.random_range(-1.0..1.0)).collect()),
                Tensor::new(vec![2, 2, 2], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
            ],
            label: i % 4,
        })
        .collect()
}

fn random_params(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Parameters {
    let n = Parameters::zeros(spec).unwrap().len();
    Parameters::from_values(spec, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Largest |analytic - numeric| / max(|analytic|, |numeric|, 1e-6) over all
/// parameters, using central differences.
fn gradcheck(spec: &ModelSpec, params: &Parameters, batch: &[Example], cfg: &TrainConfig) -> f64 {
    let (_, grad) = loss_and_grad(params, spec, batch, cfg).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let mut p = params.clone();
        p.values[i] += h;
        let (up, _) = loss_and_grad(&p, spec, batch, cfg).unwrap();
        p.values[i] -= 2.0 * h;
        let (down, _) = loss_and_grad(&p, spec, batch, cfg).unwrap();
        let numeric = (up - down) / (2.0 * h);
        let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn gradient_matches_central_differences() {
    let spec = tiny_spec();
    let cfg = TrainConfig { l1_dense: 1e-3, l2_dense: 1e-3, ..TrainConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let batch = examples(6, 3);
    for _ in 0..20 {
        let params = random_params(&spec, &mut rng);
        let err = gradcheck(&spec, &params, &batch, &cfg);
        assert!(err < 1e-4, "relative error {err}");
    }
}

fn data() -> TrainData {
    TrainData { train: examples(24, 1), validation: examples(8, 2) }
}

fn cfg() -> TrainConfig {
    TrainConfig { learning_rate: 1e-2, batch_size: 5, max_epochs: 6, early_stop_patience: 100, rng_seed: 4, ..TrainConfig::default() }
}

#[test]
fn training_is_deterministic() {
    let a = train(&data(), &tiny_spec(), &cfg()).unwrap();
    let b = train(&data(), &tiny_spec(), &cfg()).unwrap();
    assert_eq!(a.params.values, b.params.values);
    assert_eq!(a.log, b.log);
}

#[test]
fn zero_learning_rate_keeps_initialization() {
    let spec = tiny_spec();
    let c = TrainConfig { learning_rate: 0.0, ..cfg() };
    let out = train(&data(), &spec, &c).unwrap();
    assert_eq!(out.state.values, Parameters::init(&spec, c.rng_seed).unwrap().values);
}

#[test]
fn resume_continues_the_same_trajectory() {
    let spec = tiny_spec();
    let d = data();
    let full = train(&d, &spec, &cfg()).unwrap();

    let mut first = Trainer::new(&spec, &TrainConfig { max_epochs: 3, ..cfg() }).unwrap();
    while !first.finished() {
        first.epoch(&d).unwrap();
    }
    let saved: beamsel::neural::TrainState =
        serde_json::from_str(&serde_json::to_string(first.state()).unwrap()).unwrap();
    let resumed = Trainer::resume(&spec, &cfg(), saved).unwrap().run(&d).unwrap();
    assert_eq!(resumed.log, full.log);
    assert_eq!(resumed.state.values, full.state.values);
}

#[test]
fn frozen_layers_do_not_move() {
    let spec = tiny_spec();
    let start = Parameters::init(&spec, 9).unwrap();
    let frozen = vec!["gps/0".to_string(), "gps/1".to_string()];
    let out = Trainer::warm_start(&spec, &cfg(), start.clone(), &frozen).unwrap().run(&data()).unwrap();
    for l in &out.params.layout {
        let moved = out.state.values[l.weights.clone()] != start.values[l.weights.clone()];
        assert_eq!(moved, !frozen.contains(&l.name), "layer {}", l.name);
    }
    assert!(Trainer::warm_start(&spec, &cfg(), start, &["nope".to_string()]).is_err());
}

#[test]
fn eight_samples_are_memorized() {
    let spec = ModelSpec::desk_scale(&[(Modality::Gps, vec![2]), (Modality::Lidar, vec![2, 2, 2])], 4);
    let set = examples(8, 5);
    let d = TrainData { train: set.clone(), validation: set.clone() };
    let c = TrainConfig { learning_rate: 1e-2, batch_size: 8, max_epochs: 500, early_stop_patience: 500, rng_seed: 1, ..TrainConfig::default() };
    let out = train(&d, &spec, &c).unwrap();
    assert_eq!(top1(&out.params, &spec, &set).unwrap(), 1.0);
    let s = predict(&out.params, &spec, &set[0].inputs).unwrap();
    assert!((s.s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn empty_split_is_rejected() {
    let d = TrainData { train: examples(4, 1), validation: Vec::new() };
    assert!(train(&d, &tiny_spec(), &cfg()).is_err());
}
