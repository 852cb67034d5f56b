//! Randomized property checks over the metric and data-layer invariants.

use ndarray::{arr1, Array, Array3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pixveil::data::{augment, one_hot, AugmentationPolicy, LabeledImage};
use pixveil::eval::{box_stats, psnr};
use pixveil::imageio::quantize;
use pixveil::training::sgd_update_tensor;

fn image_strategy(side: usize) -> impl Strategy<Value = Array3<f64>> {
    proptest::collection::vec(0.0f64..=1.0, 3 * side * side).prop_map(move |v| {
        Array3::from_shape_vec((3, side, side), v).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn one_hot_has_unit_mass_at_label(c in 1usize..40, frac in 0.0f64..1.0) {
        let label = ((c as f64 - 1.0) * frac) as usize;
        let v = one_hot::<f64>(label, c).unwrap();
        prop_assert_eq!(v.entries.sum(), 1.0);
        prop_assert!(v.entries.iter().all(|&e| e == 0.0 || e == 1.0));
        prop_assert_eq!(v.class_index(), label);
    }

    #[test]
    fn psnr_is_symmetric_and_peak_invariant(
        a in image_strategy(5),
        b in image_strategy(5),
        k in 0.1f64..10.0,
    ) {
        let ab = psnr(&a, &b, 1.0).unwrap();
        let ba = psnr(&b, &a, 1.0).unwrap();
        if ab.is_finite() {
            prop_assert!((ab - ba).abs() < 1e-12);
            let scaled = psnr(&a.mapv(|v| v * k), &b.mapv(|v| v * k), k).unwrap();
            prop_assert!((ab - scaled).abs() < 1e-8);
        } else {
            prop_assert!(ba.is_infinite());
        }
    }

    #[test]
    fn box_stats_match_sort_oracle(values in proptest::collection::vec(-50.0f64..50.0, 1..400)) {
        let b = box_stats(&values).unwrap();
        let mut s = values.clone();
        s.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let n = s.len();
        let q = |p: f64| {
            let pos = p * (n as f64 - 1.0);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
        };
        prop_assert!((b.q1 - q(0.25)).abs() < 1e-9);
        prop_assert!((b.median - q(0.5)).abs() < 1e-9);
        prop_assert!((b.q3 - q(0.75)).abs() < 1e-9);
        prop_assert!(b.q1 <= b.median && b.median <= b.q3);
        prop_assert!(b.whisker_low <= b.q1 && b.q3 <= b.whisker_high);
        prop_assert_eq!(b.n, n);
    }

    #[test]
    fn augment_keeps_shape_label_range(
        img in image_strategy(8),
        label in 0usize..10,
        seed in 0u64..1000,
        pad in 0usize..5,
        flip_p in 0.0f64..=1.0,
    ) {
        let image = LabeledImage { pixels: img, label };
        let policy = AugmentationPolicy { crop_padding: pad, flip_probability: flip_p, enabled: true };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = augment(&image, &policy, &mut rng);
        prop_assert_eq!(out.pixels.dim(), image.pixels.dim());
        prop_assert_eq!(out.label, label);
        prop_assert!(out.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn quantization_is_idempotent(img in image_strategy(4)) {
        let q1 = quantize(&img).unwrap();
        let q2 = quantize(&q1).unwrap();
        prop_assert_eq!(q1, q2);
    }

    #[test]
    fn sgd_zero_grad_zero_decay_is_fixed_point(
        p0 in -5.0f64..5.0,
        momentum in 0.0f64..0.99,
        lr in 1e-4f64..1.0,
    ) {
        let mut p = arr1(&[p0]).into_dyn();
        let g = arr1(&[0.0]).into_dyn();
        let mut v = arr1(&[0.0]).into_dyn();
        sgd_update_tensor(&mut p.view_mut(), &g.view(), &mut v, lr, momentum, 0.0).unwrap();
        prop_assert_eq!(p[[0]], p0);
    }

    #[test]
    fn classification_loss_nonnegative(
        c in 2usize..12,
        seed in 0u64..10_000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let label = rng.gen_range(0..c);
        let mut probs: Vec<f64> = (0..c).map(|_| rng.gen::<f64>() + 1e-6).collect();
        let sum: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|v| *v /= sum);
        let y = one_hot::<f64>(label, c).unwrap();
        let arr = Array::from_vec(probs);
        let loss = pixveil::losses::classification_loss(arr.view(), &y).unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert!(loss.is_finite());
    }
}
