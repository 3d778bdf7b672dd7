use dash_core::engine::{init_model, Checkpoint, ConvBlock, ConvNetConfig, Network, Pooling};
use dash_core::explain::{bilinear_upsample, colorize, grad_cam, overlay, ramp_color};
use dash_core::image::Image;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two 1x1 filters, one per class: filter 0 passes red, filter 1 passes
/// green, and class c reads only filter c.
fn two_detectors() -> Checkpoint {
    let cfg = ConvNetConfig {
        input_size: 6,
        blocks: vec![ConvBlock::new(2, 1, 1)],
        pooling: Pooling::None,
        hidden: None,
        num_classes: 2,
        seed: 0,
    };
    // kernel [2,3,1,1], bias [2], out weight [2,2], out bias [2]
    let weights = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
    init_model(&cfg).unwrap().with_network(Network::from_weights(&cfg, &weights).unwrap())
}

fn peak(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0
}

#[test]
fn target_class_picks_its_own_feature() {
    let mut img = Image::filled(6, 6, [0.0; 3]);
    img.set(0, 1, 1, 1.0);
    img.set(1, 4, 4, 1.0);
    let ckpt = two_detectors();
    let red = grad_cam(&ckpt, "both", &img, Some(0)).unwrap();
    let green = grad_cam(&ckpt, "both", &img, Some(1)).unwrap();
    assert_ne!(red.values, green.values);
    assert_eq!(peak(&red.values), 6 + 1);
    assert_eq!(peak(&green.values), 4 * 6 + 4);
    assert_eq!(red.get(4, 4), 0.0);
    assert_eq!(green.get(1, 1), 0.0);
}

#[test]
fn predicted_class_is_the_default_target() {
    let mut img = Image::filled(6, 6, [0.0; 3]);
    img.set(1, 2, 3, 1.0);
    let hm = grad_cam(&two_detectors(), "g", &img, None).unwrap();
    assert_eq!((hm.predicted_class, hm.target_class), (1, 1));
}

#[test]
fn overlay_endpoints_and_midpoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = Image::new(6, 6, (0..108).map(|_| rng.random()).collect()).unwrap();
    let hm = grad_cam(&init_model(&ConvNetConfig {
        input_size: 6,
        blocks: vec![ConvBlock::new(3, 3, 1)],
        pooling: Pooling::None,
        hidden: None,
        num_classes: 2,
        seed: 5,
    })
    .unwrap(), "r", &img, Some(0))
    .unwrap();
    let color = colorize(&hm);
    assert_eq!(overlay(&img, &hm, 0.0).unwrap().blend, img);
    assert_eq!(overlay(&img, &hm, 1.0).unwrap().blend, color);
    let half = overlay(&img, &hm, 0.5).unwrap();
    for c in 0..3 {
        let expected = 0.5 * img.get(c, 2, 3) + 0.5 * ramp_color(hm.get(2, 3))[c];
        assert!((half.blend.get(c, 2, 3) - expected).abs() < 1e-15);
    }
    assert_eq!(half.original, img);
    assert!(overlay(&img, &hm, 1.5).is_err());
    assert!(overlay(&Image::filled(4, 4, [0.0; 3]), &hm, 0.5).is_err());
}

#[test]
fn ramp_runs_blue_to_red() {
    assert_eq!(ramp_color(0.0), [0.0, 0.0, 1.0]);
    assert_eq!(ramp_color(1.0), [1.0, 0.0, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn upsampling_keeps_the_peak_in_its_cell(
        seed in 0u64..10_000,
        h in 2usize..6,
        w in 2usize..6,
        scale in 2usize..6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coarse: Vec<f64> = (0..h * w).map(|_| rng.random()).collect();
        let (out_h, out_w) = (h * scale, w * scale);
        let up = bilinear_upsample(&coarse, h, w, out_h, out_w);
        let cell = peak(&coarse);
        let pixel = peak(&up);
        prop_assert!((up[pixel] - coarse[cell]).abs() < 1e-12);
        prop_assert_eq!((pixel / out_w) / scale, cell / w);
        prop_assert_eq!((pixel % out_w) / scale, cell % w);
    }

    #[test]
    fn heatmaps_are_normalized_at_image_size(seed in 0u64..10_000, class in 0usize..3) {
        let cfg = ConvNetConfig {
            input_size: 12,
            blocks: vec![ConvBlock::new(4, 3, 1), ConvBlock::new(6, 3, 1)],
            pooling: Pooling::Max2,
            hidden: None,
            num_classes: 3,
            seed,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Image::new(12, 12, (0..3 * 144).map(|_| rng.random()).collect()).unwrap();
        let hm = grad_cam(&init_model(&cfg).unwrap(), "x", &img, Some(class)).unwrap();
        prop_assert_eq!((hm.height, hm.width, hm.values.len()), (12, 12, 144));
        prop_assert!(hm.values.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!((hm.coarse_height, hm.coarse_width), (3, 3));
        if !hm.degenerate {
            prop_assert_eq!(hm.values.iter().copied().fold(0.0, f64::max), 1.0);
        }
    }
}
