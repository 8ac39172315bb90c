mod common;

use common::*;
use mlb_seg_core::data::{corrupt_mask, distance_to_other_class, generate, Corruption, GenConfig, ShapeFamily, Split};
use mlb_seg_core::LabelMask;
use proptest::prelude::*;

fn gen(count: usize, noise: f64) -> GenConfig {
    GenConfig {
        height: 32,
        width: 32,
        count,
        family: ShapeFamily::Mixed,
        noise,
    }
}

#[test]
fn foreground_fraction_over_1000_samples_is_moderate() {
    let d = generate(&gen(1000, 0.1), Split::Clean, &mut rng(1)).unwrap();
    let fg: usize = d.samples.iter().map(|s| s.mask.as_ref().unwrap().count_fg()).sum();
    let frac = fg as f64 / (1000.0 * 1024.0);
    assert!((0.05..=0.6).contains(&frac), "{frac}");
    for s in &d.samples {
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.mask.as_ref().unwrap().count_fg() > 0);
    }
}

#[test]
fn splits_drawn_from_one_stream_are_disjoint() {
    let mut r = rng(2);
    let a = generate(&gen(20, 0.1), Split::Clean, &mut r).unwrap();
    let b = generate(&gen(20, 0.1), Split::Unlabeled, &mut r).unwrap();
    for x in &a.samples {
        assert!(b.samples.iter().all(|y| y.image != x.image));
    }
}

fn disk_mask(h: usize, w: usize, cy: f64, cx: f64, rad: f64) -> LabelMask {
    LabelMask::from_fn(h, w, |r, c| {
        let (y, x) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
        y * y + x * x <= rad * rad
    })
}

proptest! {
    #[test]
    fn corruption_stays_near_the_boundary(
        seed in 0u64..1000,
        cy in 8.0f64..24.0,
        cx in 8.0f64..24.0,
        rad in 2.0f64..7.0,
        dilate in 0.0f64..3.0,
        erode in 0.0f64..3.0,
        flip in 0.0f64..1.0,
    ) {
        let m = disk_mask(32, 32, cy, cx, rad);
        let c = Corruption { dilate_r: dilate, erode_r: erode, flip_rate: flip };
        let out = corrupt_mask(&m, &c, &mut rng(seed)).unwrap();
        let reach = dilate.max(erode).max(2.0);
        let dist = distance_to_other_class(&m);
        for (i, d) in dist.iter().enumerate() {
            if out.data()[i] != m.data()[i] {
                prop_assert!(*d <= reach, "pixel {} changed at distance {}", i, d);
            }
        }
    }
}

#[test]
fn out_of_range_rates_are_rejected() {
    let m = disk_mask(8, 8, 4.0, 4.0, 2.0);
    for c in [
        Corruption {
            flip_rate: 1.5,
            ..Default::default()
        },
        Corruption {
            flip_rate: -0.1,
            ..Default::default()
        },
        Corruption {
            dilate_r: -1.0,
            ..Default::default()
        },
    ] {
        assert!(corrupt_mask(&m, &c, &mut rng(0)).is_err());
    }
}
