use dash_core::dataset::{generate_biased_dataset, BiasedDatasetSpec, Dataset, ImageSample, Provenance, Split};
use dash_core::engine::{
    backward_check, cross_entropy, extract_latent, init_model, predict, read_checkpoint, softmax, train,
    write_checkpoint, Checkpoint, ConvBlock, ConvNetConfig, Network, Pooling, TrainConfig, GRADCHECK_SAMPLES,
};
use dash_core::image::Image;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(seed: u64, pooling: Pooling, hidden: Option<usize>) -> ConvNetConfig {
    ConvNetConfig {
        input_size: 8,
        blocks: vec![ConvBlock::new(3, 3, 1), ConvBlock::new(4, 3, 1)],
        pooling,
        hidden,
        num_classes: 3,
        seed,
    }
}

fn noise_batch(seed: u64, size: usize, n: usize, classes: usize) -> Vec<(Image, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let data = (0..3 * size * size).map(|_| rng.random()).collect();
            (Image::new(size, size, data).unwrap(), rng.random_range(0..classes))
        })
        .collect()
}

fn refs(batch: &[(Image, usize)]) -> Vec<(&Image, usize)> {
    batch.iter().map(|(i, l)| (i, *l)).collect()
}

fn sample(id: String, rgb: [f64; 3], label: usize, split: Split) -> ImageSample {
    ImageSample {
        id,
        pixels: Image::filled(8, 8, rgb),
        label,
        split,
        provenance: Provenance::Original,
        source_id: None,
        style_cluster: None,
        glyph: None,
    }
}

/// Solid red (class 0) against solid green (class 1), with a little jitter.
fn red_green() -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut samples = Vec::new();
    for split in Split::ALL {
        for i in 0..12 {
            let label = i % 2;
            let j: f64 = rng.random_range(-0.05..0.05);
            let rgb = if label == 0 { [0.9 + j, 0.1, 0.1] } else { [0.1, 0.9 + j, 0.1] };
            samples.push(sample(format!("{}-{i:02}", split.as_str()), rgb, label, split));
        }
    }
    Dataset::new(vec!["red".into(), "green".into()], 8, 8, samples, None).unwrap()
}

fn toy_train(epochs: usize, batch_size: usize, learning_rate: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        learning_rate,
        momentum: 0.9,
        shuffle_seed: 1,
    }
}

fn two_class(seed: u64) -> Checkpoint {
    let mut cfg = tiny(seed, Pooling::Max2, None);
    cfg.num_classes = 2;
    init_model(&cfg).unwrap()
}

#[test]
fn separable_toy_is_learned() {
    let ds = red_green();
    let child = train(&two_class(2), &ds, &toy_train(5, 4, 0.1), |_| {}).unwrap();
    assert!(predict(&child, &ds, Split::Train).unwrap().accuracy() >= 0.99);
}

#[test]
fn small_step_full_batch_loss_does_not_rise_early() {
    let ds = red_green();
    let mut config = toy_train(3, 12, 0.01);
    config.momentum = 0.0;
    let child = train(&two_class(5), &ds, &config, |_| {}).unwrap();
    let losses: Vec<f64> = child.epoch_losses.iter().map(|e| e.train_loss).collect();
    assert_eq!(losses.len(), 3);
    assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
}

#[test]
fn random_init_is_at_chance() {
    let mut spec = BiasedDatasetSpec::colored_shapes(1.0 / 3.0, 4);
    spec.counts.test = 300;
    spec.counts.train = 3;
    spec.counts.val = 3;
    let ds = generate_biased_dataset(&spec).unwrap();
    let acc = predict(&init_model(&ConvNetConfig::small(3, 9)).unwrap(), &ds, Split::Test)
        .unwrap()
        .accuracy();
    let sigma = (1.0 / 3.0 * 2.0 / 3.0 / 300.0_f64).sqrt();
    assert!((acc - 1.0 / 3.0).abs() <= 3.0 * sigma, "{acc}");
}

#[test]
fn per_image_loss_matches_a_standalone_log_softmax() {
    let mut spec = BiasedDatasetSpec::colored_shapes(0.95, 2);
    spec.counts.test = 5;
    let ds = generate_biased_dataset(&spec).unwrap();
    let ckpt = init_model(&ConvNetConfig::small(3, 2)).unwrap();
    let preds = predict(&ckpt, &ds, Split::Test).unwrap();
    for record in &preds.records {
        let logits = ckpt.network().logits(&ds.get(&record.image_id).unwrap().pixels);
        let denom: f64 = logits.iter().map(|z| z.exp()).sum();
        let expected = -(logits[record.label].exp() / denom).ln();
        assert!((record.loss - expected).abs() < 1e-12);
        assert_eq!(record.correct, record.predicted == record.label);
    }
}

#[test]
fn identity_kernel_latent_is_the_hand_computed_mean() {
    // one 3x3 filter with a centre tap on red, no pooling; the image is 4x4
    let cfg = ConvNetConfig {
        input_size: 4,
        blocks: vec![ConvBlock::new(1, 3, 1)],
        pooling: Pooling::None,
        hidden: None,
        num_classes: 2,
        seed: 0,
    };
    let mut weights = vec![0.0; 27 + 1 + 2 + 2];
    weights[4] = 1.0;
    weights[27] = -0.25;
    let ckpt = init_model(&cfg).unwrap().with_network(Network::from_weights(&cfg, &weights).unwrap());
    let red = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 0.2, 0.3, 0.1, 0.0, 0.6];
    let mut img = Image::filled(4, 4, [0.0; 3]);
    for (i, &v) in red.iter().enumerate() {
        img.set(0, i / 4, i % 4, v);
    }
    // ReLU(v - 0.25) summed: 0.05+0.15+0.25+0.35+0.45+0.55+0.65+0.75 + 0.05 + 0.35 = 3.6
    let latent = extract_latent(&ckpt, &img).unwrap();
    assert_eq!(latent.len(), 1);
    assert!((latent[0] - 3.6 / 16.0).abs() < 1e-12, "{latent:?}");
}

#[test]
fn latent_dimension_is_the_final_channel_count() {
    let ckpt = init_model(&ConvNetConfig::small(3, 0)).unwrap();
    let latent = extract_latent(&ckpt, &Image::filled(32, 32, [0.5; 3])).unwrap();
    assert_eq!(latent.len(), 16);
}

#[test]
fn gradients_pass_the_finite_difference_check() {
    for (seed, pooling, hidden) in [
        (1, Pooling::Max2, None),
        (2, Pooling::None, None),
        (3, Pooling::Max2, Some(5)),
        (4, Pooling::None, Some(4)),
    ] {
        let cfg = tiny(seed, pooling, hidden);
        let batch = noise_batch(seed, 8, 3, 3);
        let report = backward_check(&init_model(&cfg).unwrap(), &refs(&batch), seed).unwrap();
        assert_eq!(report.checked, GRADCHECK_SAMPLES);
        assert!(report.max_relative_error < 1e-4, "{cfg:?}: {report:?}");
    }
}

#[test]
fn empty_gradcheck_batch_is_rejected() {
    let ckpt = init_model(&tiny(0, Pooling::Max2, None)).unwrap();
    assert!(backward_check(&ckpt, &[], 0).is_err());
}

#[test]
fn doubling_the_loss_scale_doubles_every_gradient() {
    let net = init_model(&tiny(7, Pooling::Max2, Some(6))).unwrap();
    let batch = noise_batch(7, 8, 4, 3);
    let (l1, g1) = net.network().loss_and_gradients(&refs(&batch), 1.0);
    let (l2, g2) = net.network().loss_and_gradients(&refs(&batch), 2.0);
    assert_eq!(l2, 2.0 * l1);
    for (a, b) in g1.iter().flatten().zip(g2.iter().flatten()) {
        assert_eq!(*b, 2.0 * a);
    }
}

#[test]
fn parameter_cut_from_the_graph_has_zero_gradient() {
    // zeroing hidden unit 0's outgoing weights disconnects its incoming row
    let cfg = tiny(8, Pooling::Max2, Some(3));
    let net = Network::init(&cfg).unwrap();
    let shapes: Vec<Vec<usize>> = net.params().iter().map(|p| p.shape().to_vec()).collect();
    let mut weights = net.flat_weights();
    let offset = |param: usize| shapes[..param].iter().map(|s| s.iter().product::<usize>()).sum::<usize>();
    let (hidden_w, out_w) = (4, 6);
    for class in 0..3 {
        weights[offset(out_w) + class * 3] = 0.0;
    }
    let net = Network::from_weights(&cfg, &weights).unwrap();
    let batch = noise_batch(8, 8, 4, 3);
    let (_, grads) = net.loss_and_gradients(&refs(&batch), 1.0);
    let fan_in = shapes[hidden_w][1];
    assert!(grads[hidden_w][..fan_in].iter().all(|&g| g == 0.0));
    assert_eq!(grads[hidden_w + 1][0], 0.0);
    assert!(grads[hidden_w][fan_in..].iter().any(|&g| g != 0.0));
}

#[test]
fn replaying_a_child_from_its_parent_is_bitwise() {
    let ds = red_green();
    let parent = two_class(11);
    let config = toy_train(2, 5, 0.05);
    let a = train(&parent, &ds, &config, |_| {}).unwrap();
    let b = train(&parent, &ds, &config, |_| {}).unwrap();
    assert_eq!(a.id, b.id);
    assert_eq!(a.parent_id.as_deref(), Some(parent.id.as_str()));
    assert_eq!(a.network().flat_weights(), b.network().flat_weights());
    assert_eq!(a.epoch_losses, b.epoch_losses);
    assert_eq!(parent.network(), two_class(11).network());
}

#[test]
fn checkpoint_file_round_trips() {
    let ds = red_green();
    let ckpt = train(&two_class(12), &ds, &toy_train(1, 6, 0.05), |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    write_checkpoint(&ckpt, &path).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back.id, ckpt.id);
    assert_eq!(back.parent_id, ckpt.parent_id);
    assert_eq!(back.epoch_losses, ckpt.epoch_losses);
    assert_eq!(back.network().flat_weights(), ckpt.network().flat_weights());
    assert_eq!(predict(&back, &ds, Split::Val).unwrap(), predict(&ckpt, &ds, Split::Val).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 2..10)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn cross_entropy_is_nonnegative_with_softmax_gradient(
        logits in prop::collection::vec(-30.0f64..30.0, 2..8),
        pick in 0usize..8,
    ) {
        let label = pick % logits.len();
        let (loss, grad) = cross_entropy(&logits, label);
        prop_assert!(loss >= 0.0);
        let p = softmax(&logits);
        for (i, (&g, &pi)) in grad.iter().zip(&p).enumerate() {
            let expected = pi - if i == label { 1.0 } else { 0.0 };
            prop_assert!((g - expected).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn gradcheck_holds_for_random_seeds(seed in 0u64..10_000, hidden in prop::option::of(2usize..6)) {
        let cfg = tiny(seed, Pooling::Max2, hidden);
        let batch = noise_batch(seed + 1, 8, 2, 3);
        let report = backward_check(&init_model(&cfg).unwrap(), &refs(&batch), seed).unwrap();
        prop_assert!(report.max_relative_error < 1e-4, "{:?}", report);
    }
}
