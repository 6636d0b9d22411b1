use delg::backbone::{self, BackboneConfig, LayerSpec};
use delg::losses::{GradientControl, LossWeights};
use delg::model::ParamStore;
use delg::numgraph::Tensor;
use delg::trainer::synth::{self, SynthError};
use delg::trainer::{
    compute_tau, initial_model, is_local_branch, linear_decay, measure_sparsity, save_trace, train,
    write_trace_csv, zero_fraction, Dataset, Sgd, SynthSpec, TrainConfig, TrainError, TRACE_HEADER,
};
use delg::ModelConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        layers: vec![
            LayerSpec::new(3, 4, 2, false),
            LayerSpec::new(3, 8, 2, false),
            LayerSpec::new(3, 8, 1, true),
            LayerSpec::new(3, 16, 2, false),
        ],
        tap_shallow: 2,
        tap_deep: 3,
        input_size: 32,
        in_channels: 3,
    }
}

fn small_spec() -> SynthSpec {
    SynthSpec {
        num_classes: 3,
        images_per_class: 5,
        image_size: 32,
        ..SynthSpec::default()
    }
}

fn small_run(steps: usize) -> (TrainConfig, ModelConfig, Dataset) {
    let config = TrainConfig {
        steps,
        batch_size: 4,
        eval_every: 2,
        seed: 11,
        ..TrainConfig::default()
    };
    let model = ModelConfig::new(small_backbone(), 3);
    let data = synth::generate_dataset(&small_spec(), 5).unwrap();
    (config, model, data)
}

fn assert_same_images(a: &Dataset, b: &Dataset) {
    assert_eq!(a.num_classes, b.num_classes);
    for (x, y) in a.all().zip(b.all()) {
        assert_eq!(x.name, y.name);
        assert_eq!(x.label, y.label);
        assert_eq!(x.image.shape(), y.image.shape());
        assert!(x.image.data().iter().zip(y.image.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn dataset_is_deterministic_per_seed() {
    let spec = small_spec();
    let a = synth::generate_dataset(&spec, 42).unwrap();
    let b = synth::generate_dataset(&spec, 42).unwrap();
    assert_same_images(&a, &b);
    let c = synth::generate_dataset(&spec, 43).unwrap();
    assert_ne!(a.train[0].image, c.train[0].image);
}

#[test]
fn dataset_split_and_layout() {
    let data = synth::generate_dataset(&SynthSpec { images_per_class: 10, ..small_spec() }, 1).unwrap();
    assert_eq!(data.train.len(), 24);
    assert_eq!(data.val.len(), 6);
    for s in data.all() {
        assert_eq!(s.image.shape(), &[32, 32, 3]);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.name.starts_with(&format!("class_{:03}/", s.label)));
    }
}

#[test]
fn without_augmentation_all_views_of_a_class_are_identical() {
    let spec = small_spec().without_augmentation();
    let data = synth::generate_dataset(&spec, 9).unwrap();
    for class in 0..spec.num_classes {
        let views: Vec<&Tensor> = data.all().filter(|s| s.label == class).map(|s| &s.image).collect();
        assert_eq!(views.len(), spec.images_per_class);
        assert!(views.iter().all(|v| *v == views[0]));
    }
    let first: Vec<&Tensor> = (0..spec.num_classes)
        .map(|c| &data.all().find(|s| s.label == c).unwrap().image)
        .collect();
    assert_ne!(first[0], first[1]);
    assert_ne!(first[1], first[2]);
}

#[test]
fn degenerate_specs_are_rejected() {
    let bad = [
        SynthSpec { num_classes: 1, ..small_spec() },
        SynthSpec { images_per_class: 0, ..small_spec() },
        SynthSpec { image_size: 8, ..small_spec() },
        SynthSpec { glyph_count: (0, 3), ..small_spec() },
        SynthSpec { glyph_count: (5, 3), ..small_spec() },
        SynthSpec { scale_range: (1.2, 0.8), ..small_spec() },
        SynthSpec { translation: -0.1, ..small_spec() },
    ];
    for spec in bad {
        assert!(
            matches!(synth::generate_dataset(&spec, 0), Err(SynthError::Degenerate(_))),
            "{spec:?}"
        );
    }
}

fn squared_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[test]
fn raw_pixel_nearest_neighbour_beats_chance_on_default_spec() {
    let spec = SynthSpec::default();
    let data = synth::generate_dataset(&spec, 2024).unwrap();
    let correct = data
        .val
        .iter()
        .filter(|q| {
            let nearest = data
                .train
                .iter()
                .min_by(|a, b| squared_distance(&q.image, &a.image).total_cmp(&squared_distance(&q.image, &b.image)))
                .unwrap();
            nearest.label == q.label
        })
        .count();
    let accuracy = correct as f64 / data.val.len() as f64;
    assert!(accuracy > 2.0 / spec.num_classes as f64, "1-NN accuracy {accuracy}");
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth::generate_dataset(&small_spec(), 3).unwrap();
    synth::write_dataset(&data, dir.path()).unwrap();
    let back = synth::read_dataset(dir.path()).unwrap();
    assert_eq!(back.num_classes, data.num_classes);
    assert_eq!(back.train.len(), data.train.len());
    assert_eq!(back.val.len(), data.val.len());
    for (a, b) in data.all().zip(back.all()) {
        assert_eq!((a.name.as_str(), a.label), (b.name.as_str(), b.label));
        // 8-bit quantization on disk.
        for (x, y) in a.image.data().iter().zip(b.image.data()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
    let labels = synth::read_labels(&dir.path().join("labels.tsv")).unwrap();
    assert_eq!(labels.len(), 15);
    let header = std::fs::read(dir.path().join(&data.train[0].name)).unwrap();
    assert!(header.starts_with(b"P6\n32 32\n255\n"));
}

#[test]
fn malformed_labels_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.tsv");
    std::fs::write(&path, "class_000/a.ppm\tzero\n").unwrap();
    assert!(matches!(synth::read_labels(&path), Err(SynthError::Labels { .. })));
}

#[test]
fn zero_steps_return_the_initialization() {
    let (config, model, data) = small_run(0);
    let out = train(&config, &model, &data).unwrap();
    assert_eq!(out.model, initial_model(&config, &model).unwrap());
    assert_eq!(out.trace.len(), 1);
    assert_eq!(out.trace[0].step, 0);
}

#[test]
fn training_is_bitwise_reproducible() {
    let (config, model, data) = small_run(4);
    let a = train(&config, &model, &data).unwrap();
    let b = train(&config, &model, &data).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.attention_sample, b.attention_sample);
    let c = train(&TrainConfig { seed: 12, ..config }, &model, &data).unwrap();
    assert_ne!(a.model, c.model);
}

fn global_params(params: &ParamStore) -> ParamStore {
    params
        .iter()
        .filter(|(name, _)| !is_local_branch(name))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

#[test]
fn stop_gradient_run_follows_the_global_only_trajectory() {
    let (config, model, data) = small_run(6);
    let global_only = TrainConfig {
        weights: LossWeights { lambda: 0.0, beta: 0.0 },
        ..config.clone()
    };
    let stopped = train(&config, &model, &data).unwrap();
    let reference = train(&global_only, &model, &data).unwrap();
    assert_eq!(global_params(&stopped.model.params), global_params(&reference.model.params));
    for (a, b) in stopped.trace.iter().zip(&reference.trace) {
        assert_eq!(a.loss_g, b.loss_g);
        assert_eq!(a.sparsity_s, b.sparsity_s);
    }

    let naive = train(
        &TrainConfig { control: GradientControl::Naive, ..config },
        &model,
        &data,
    )
    .unwrap();
    assert_ne!(global_params(&naive.model.params), global_params(&reference.model.params));
}

#[test]
fn trace_has_a_row_per_evaluation() {
    let (config, model, data) = small_run(6);
    let out = train(&config, &model, &data).unwrap();
    let steps: Vec<usize> = out.trace.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 2, 4, 6]);
    for r in &out.trace {
        assert!((0.0..=1.0).contains(&r.sparsity_s) && (0.0..=1.0).contains(&r.sparsity_d));
        assert_eq!(r.lr, config.lr(r.step));
    }
    assert_eq!(out.trace.last().unwrap().lr, 0.0);

    let mut csv = Vec::new();
    write_trace_csv(&mut csv, &out.trace).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], TRACE_HEADER);
    assert_eq!(lines.len(), config.steps / config.eval_every + 2);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 7));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    save_trace(&path, &out.trace).unwrap();
    assert_eq!(std::fs::read_to_string(path).unwrap(), text);
}

#[test]
fn attention_sample_covers_the_last_batch() {
    let (config, model, data) = small_run(2);
    let out = train(&config, &model, &data).unwrap();
    let side = model.backbone.output_side(backbone::Tap::Shallow, 32);
    assert_eq!(out.attention_sample.len(), config.batch_size * side * side);
    assert!(out.attention_sample.iter().all(|&a| a > 0.0));
}

#[test]
fn invalid_training_setups_are_rejected() {
    let (config, model, data) = small_run(2);
    let wrong_classes = ModelConfig::new(small_backbone(), 4);
    assert!(matches!(train(&config, &wrong_classes, &data), Err(TrainError::InvalidConfig(_))));
    let empty = Dataset { num_classes: 3, train: vec![], val: vec![] };
    assert!(matches!(train(&config, &model, &empty), Err(TrainError::InvalidConfig(_))));
    for bad in [
        TrainConfig { batch_size: 0, ..config.clone() },
        TrainConfig { momentum: 1.0, ..config.clone() },
        TrainConfig { lr_init: -0.1, ..config.clone() },
        TrainConfig { clip_norm: Some(0.0), ..config.clone() },
        TrainConfig { weights: LossWeights { lambda: -1.0, beta: 1.0 }, ..config.clone() },
    ] {
        assert!(matches!(train(&bad, &model, &data), Err(TrainError::InvalidConfig(_))));
    }
}

#[test]
fn divergence_returns_the_last_good_model() {
    let (config, model, data) = small_run(50);
    let config = TrainConfig {
        lr_init: 1e200,
        clip_norm: None,
        ..config
    };
    match train(&config, &model, &data) {
        Err(TrainError::Diverged { last_good, .. }) => {
            assert!(last_good.params.values().all(Tensor::is_finite));
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.trace)),
    }
}

#[test]
fn lr_schedule_endpoints_and_midpoint() {
    let config = TrainConfig { steps: 2000, lr_init: 0.05, ..TrainConfig::default() };
    assert_eq!(config.lr(0), 0.05);
    assert_eq!(config.lr(2000), 0.0);
    assert_eq!(config.lr(1000), 0.025);
    assert_eq!(linear_decay(0.1, 0, 0), 0.0);
}

#[test]
fn momentum_sgd_two_steps_by_hand() {
    // theta = [1, -2]; g = [0.5, 1] then [-1, 0]; lr 0.1, mu 0.5.
    // v1 = [-0.05, -0.1], theta1 = [0.95, -2.1]
    // v2 = [-0.025 + 0.1, -0.05] = [0.075, -0.05], theta2 = [1.025, -2.15]
    let mut params = ParamStore::from([("w".to_string(), Tensor::vector(vec![1.0, -2.0]))]);
    let mut sgd = Sgd::new(0.5);
    let grad = |v: Vec<f64>| ParamStore::from([("w".to_string(), Tensor::vector(v))]);
    sgd.step(&mut params, &grad(vec![0.5, 1.0]), 0.1);
    sgd.step(&mut params, &grad(vec![-1.0, 0.0]), 0.1);
    let w = params["w"].data();
    assert!((w[0] - 1.025).abs() < 1e-15 && (w[1] + 2.15).abs() < 1e-15, "{w:?}");
}

#[test]
fn sparsity_examples() {
    let maps = backbone::FeatureMaps {
        shallow: Tensor::zeros(&[1, 2, 2, 3]),
        deep: Tensor::filled(&[1, 1, 1, 4], 0.2),
    };
    assert_eq!(measure_sparsity(&maps), (1.0, 0.0));
    assert_eq!(zero_fraction(&Tensor::vector(vec![0.0, 3.0, 0.0, 1.0])), 0.5);
}

#[test]
#[ignore = "does not hold for the residual default backbone: D is denser than S on 6 of seeds 0-7 at init"]
fn deep_map_is_sparser_than_shallow_at_initialization() {
    let config = ModelConfig::new(BackboneConfig::default(), 16);
    let data = synth::generate_dataset(&SynthSpec { images_per_class: 2, ..SynthSpec::default() }, 0).unwrap();
    let batch = delg::trainer::stack_images(data.train.iter().map(|s| &s.image)).unwrap();
    for seed in 0..5 {
        let model = initial_model(&TrainConfig { seed, ..TrainConfig::default() }, &config).unwrap();
        let maps = backbone::extract_maps(&config.backbone, &model.params, &batch).unwrap();
        let (s, d) = measure_sparsity(&maps);
        assert!(d >= s, "seed {seed}: S {s} D {d}");
    }
}

#[test]
fn tau_examples() {
    assert_eq!(compute_tau(&[1.0, 2.0, 3.0], 50.0).unwrap(), 2.0);
    assert_eq!(compute_tau(&[4.0, 1.0, 3.0, 2.0], 50.0).unwrap(), 2.5);
    assert_eq!(compute_tau(&[7.0], 75.0).unwrap(), 7.0);
    assert!(matches!(compute_tau(&[], 50.0), Err(TrainError::EmptySample)));
    assert!(compute_tau(&[1.0], 101.0).is_err());
}

#[test]
fn tau_on_large_sample_matches_selection_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let scores: Vec<f64> = (0..10_000).map(|_| rng.random_range(0.0..5.0)).collect();
    // 0.75 * 9999 = 7499.25: a quarter of the way from order statistic 7499 to 7500.
    let mut work = scores.clone();
    let lo = *work.select_nth_unstable_by(7499, f64::total_cmp).1;
    let hi = *work.select_nth_unstable_by(7500, f64::total_cmp).1;
    let expected = lo + 0.25 * (hi - lo);
    assert!((compute_tau(&scores, 75.0).unwrap() - expected).abs() < 1e-9);
}

proptest! {
    #[test]
    fn lr_schedule_is_linear(lr in 1e-4f64..1.0, steps in 1usize..5000, frac in 0.0f64..=1.0) {
        let step = ((steps as f64) * frac).floor() as usize;
        let config = TrainConfig { steps, lr_init: lr, ..TrainConfig::default() };
        prop_assert_eq!(config.lr(step), lr * (1.0 - step as f64 / steps as f64));
        prop_assert!(config.lr(step) >= 0.0 && config.lr(step) <= lr);
    }

    #[test]
    fn sparsity_is_a_fraction(data in prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..2.0], 1..64)) {
        let f = zero_fraction(&Tensor::vector(data.clone()));
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(f, data.iter().filter(|&&v| v == 0.0).count() as f64 / data.len() as f64);
    }

    #[test]
    fn tau_lies_within_sample_range(scores in prop::collection::vec(-10.0f64..10.0, 1..200), p in 0.0f64..=100.0) {
        let tau = compute_tau(&scores, p).unwrap();
        let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(tau >= min && tau <= max);
        let below = scores.iter().filter(|&&s| s < tau).count() as f64;
        prop_assert!(below <= p / 100.0 * scores.len() as f64 + 1.0);
    }
}
