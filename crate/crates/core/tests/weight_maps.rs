mod common;

use common::*;
use mlb_seg_core::meta::{clamp_normalize, meta_weight_maps, WeightMapPair};
use mlb_seg_core::{HyperConfig, Tensor};
use proptest::prelude::*;

fn family_sums(maps: &[WeightMapPair]) -> (f64, f64) {
    (
        maps.iter().map(|m| m.n.sum()).sum(),
        maps.iter().map(|m| m.p.sum()).sum(),
    )
}

fn raw_strategy() -> impl Strategy<Value = Vec<WeightMapPair>> {
    (1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(b, h, w)| {
        proptest::collection::vec(
            (
                proptest::collection::vec(-1e3f64..1e3, h * w),
                proptest::collection::vec(-1e3f64..1e3, h * w),
            ),
            b,
        )
        .prop_map(move |maps| {
            maps.into_iter()
                .map(|(n, p)| WeightMapPair {
                    n: Tensor::new(vec![h, w], n).unwrap(),
                    p: Tensor::new(vec![h, w], p).unwrap(),
                })
                .collect()
        })
    })
}

fn in_zero_or_one(s: f64) -> bool {
    s == 0.0 || (s - 1.0).abs() <= 1e-6
}

proptest! {
    #[test]
    fn normalized_weights_are_nonnegative_and_sum_to_zero_or_one(raw in raw_strategy()) {
        let out = clamp_normalize(&raw, 1e-12);
        for m in &out {
            prop_assert!(m.n.data().iter().chain(m.p.data()).all(|&v| v >= 0.0));
        }
        let (sn, sp) = family_sums(&out);
        prop_assert!(in_zero_or_one(sn), "n sum {}", sn);
        prop_assert!(in_zero_or_one(sp), "p sum {}", sp);
    }

    #[test]
    fn clamping_keeps_the_zero_pattern_of_nonnegative_raws(raw in raw_strategy()) {
        let out = clamp_normalize(&raw, 1e-12);
        for (r, o) in raw.iter().zip(&out) {
            for (a, b) in r.n.data().iter().chain(r.p.data()).zip(o.n.data().iter().chain(o.p.data())) {
                prop_assert_eq!(*a > 0.0, *b > 0.0);
            }
        }
    }

    #[test]
    fn positive_rescaling_of_raws_is_cancelled(raw in raw_strategy(), c in prop::sample::select(vec![0.1, 10.0, 3.7])) {
        let base = clamp_normalize(&raw, 1e-12);
        let scaled: Vec<WeightMapPair> = raw.iter().map(|m| WeightMapPair { n: m.n.scale(c), p: m.p.scale(c) }).collect();
        let out = clamp_normalize(&scaled, 1e-12);
        for (a, b) in base.iter().zip(&out) {
            for (x, y) in a.n.data().iter().chain(a.p.data()).zip(b.n.data().iter().chain(b.p.data())) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn meta_weights_are_invariant_to_scaling_alpha_or_beta() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let theta = random_params(2, &mut r);
        let noisy = random_samples(3, 8, 8, &mut r);
        let clean = random_samples(2, 8, 8, &mut r);
        let labels: Vec<_> = (0..3).map(|_| random_mask(8, 8, &mut r)).collect();
        let cfg = HyperConfig::default();
        let base = clamp_normalize(
            &meta_weight_maps(&theta, &noisy, &clean, &labels, &cfg).unwrap(),
            cfg.eps,
        );
        let (sn, sp) = family_sums(&base);
        assert!(in_zero_or_one(sn) && in_zero_or_one(sp));
        for c in [0.1, 10.0] {
            for cfg2 in [
                HyperConfig {
                    alpha: cfg.alpha * c,
                    ..cfg.clone()
                },
                HyperConfig {
                    beta: cfg.beta * c,
                    ..cfg.clone()
                },
            ] {
                let out = clamp_normalize(
                    &meta_weight_maps(&theta, &noisy, &clean, &labels, &cfg2).unwrap(),
                    cfg.eps,
                );
                for (a, b) in base.iter().zip(&out) {
                    for (x, y) in
                        a.n.data()
                            .iter()
                            .chain(a.p.data())
                            .zip(b.n.data().iter().chain(b.p.data()))
                    {
                        assert!((x - y).abs() <= 1e-6, "c = {c}: {x} vs {y}");
                    }
                }
            }
        }
    }
}

#[test]
fn meta_weights_are_zero_where_pixel_gradients_vanish() {
    // A pixel whose loss gradient is orthogonal to the clean gradient has a
    // zero raw weight. With zero parameters only the head bias receives a
    // gradient, and a balanced pseudo-label map yields a clean gradient of
    // exactly zero, so every raw weight is zero.
    let theta = mlb_seg_core::SegNet::new(1).zeros();
    let mut r = rng(3);
    let clean = vec![mlb_seg_core::data::Sample {
        image: random_image(4, 4, &mut r),
        mask: Some(mlb_seg_core::LabelMask::from_fn(4, 4, |_, c| c % 2 == 0)),
    }];
    let noisy = random_samples(2, 4, 4, &mut r);
    let labels: Vec<_> = (0..2).map(|_| random_mask(4, 4, &mut r)).collect();
    let raw = meta_weight_maps(&theta, &noisy, &clean, &labels, &HyperConfig::default()).unwrap();
    let out = clamp_normalize(&raw, 1e-12);
    for m in out {
        assert!(m.n.data().iter().chain(m.p.data()).all(|&v| v == 0.0));
    }
}
