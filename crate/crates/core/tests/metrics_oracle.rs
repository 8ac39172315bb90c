mod common;

use common::*;
use mlb_seg_core::metrics::{boundary, dice, evaluate_pair, jaccard, surface_distances};
use mlb_seg_core::LabelMask;
use proptest::prelude::*;
use rand::Rng;

/// Boundary pixels by a direct neighbour scan with signed offsets.
fn boundary_points(m: &LabelMask) -> Vec<(i64, i64)> {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let fg = |r: i64, c: i64| r >= 0 && c >= 0 && r < h && c < w && m.is_fg(r as usize, c as usize);
    let mut pts = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let on_edge = r == 0 || c == 0 || r == h - 1 || c == w - 1;
            if fg(r, c) && (on_edge || !fg(r - 1, c) || !fg(r + 1, c) || !fg(r, c - 1) || !fg(r, c + 1)) {
                pts.push((r, c));
            }
        }
    }
    pts
}

fn directed(a: &[(i64, i64)], b: &[(i64, i64)]) -> Vec<f64> {
    a.iter()
        .map(|&(r, c)| {
            b.iter()
                .map(|&(s, t)| (((r - s) * (r - s) + (c - t) * (c - t)) as f64).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn blob_mask(h: usize, w: usize, rng: &mut impl Rng) -> LabelMask {
    // union of a few random rectangles, so boundaries are non-trivial
    let mut m = LabelMask::filled(h, w, 0);
    for _ in 0..rng.random_range(1..4) {
        let (r0, c0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (r1, c1) = (rng.random_range(r0..h), rng.random_range(c0..w));
        for r in r0..=r1 {
            for c in c0..=c1 {
                m.set(r, c, 1);
            }
        }
    }
    m
}

#[test]
fn surface_distances_match_brute_force() {
    let mut r = rng(1);
    for case in 0..200 {
        let (a, b) = if case % 2 == 0 {
            (blob_mask(16, 16, &mut r), blob_mask(16, 16, &mut r))
        } else {
            (random_mask(16, 16, &mut r), random_mask(16, 16, &mut r))
        };
        let (pa, pb) = (boundary_points(&a), boundary_points(&b));
        let got = surface_distances(&a, &b).unwrap();
        assert!(!got.degenerate);
        let (ab, ba) = (directed(&pa, &pb), directed(&pb, &pa));
        let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
        let hd = max(&ab).max(max(&ba));
        let asd = (ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (ab.len() + ba.len()) as f64;
        assert!((got.hd - hd).abs() <= 1e-9, "case {case}: hd {} vs {hd}", got.hd);
        assert!((got.asd - asd).abs() <= 1e-9, "case {case}: asd {} vs {asd}", got.asd);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((got.asd_pred_to_gt - mean(&ab)).abs() <= 1e-9);
        assert!((got.asd_gt_to_pred - mean(&ba)).abs() <= 1e-9);
        assert!(got.hd95 <= got.hd + 1e-12);
    }
}

#[test]
fn boundary_matches_neighbour_scan() {
    let mut r = rng(2);
    for _ in 0..50 {
        let m = random_mask(9, 7, &mut r);
        let b = boundary(&m);
        let want = boundary_points(&m);
        let got: Vec<(i64, i64)> = (0..63)
            .filter(|&i| b[i])
            .map(|i| ((i / 7) as i64, (i % 7) as i64))
            .collect();
        assert_eq!(got, want);
    }
}

#[test]
fn single_pixels_three_four_apart_are_five_apart() {
    let a = LabelMask::from_fn(8, 8, |r, c| (r, c) == (0, 0));
    let b = LabelMask::from_fn(8, 8, |r, c| (r, c) == (3, 4));
    let s = surface_distances(&a, &b).unwrap();
    assert_eq!(s.hd, 5.0);
    assert_eq!(s.asd, 5.0);
}

#[test]
fn jaccard_is_dice_over_two_minus_dice_on_1000_pairs() {
    let mut r = rng(3);
    for _ in 0..1000 {
        let (h, w) = (r.random_range(1..12), r.random_range(1..12));
        let a = random_mask(h, w, &mut r);
        let b = random_mask(h, w, &mut r);
        let d = dice(&a, &b).unwrap();
        let j = jaccard(&a, &b).unwrap();
        assert!((j - d / (2.0 - d)).abs() <= 1e-9);
    }
}

proptest! {
    #[test]
    fn distances_are_symmetric(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let a = blob_mask(12, 12, &mut r);
        let b = blob_mask(12, 12, &mut r);
        let (x, y) = (surface_distances(&a, &b).unwrap(), surface_distances(&b, &a).unwrap());
        prop_assert_eq!(x.hd, y.hd);
        prop_assert!((x.asd - y.asd).abs() <= 1e-12);
        prop_assert_eq!(x.hd95, y.hd95);
    }

    #[test]
    fn metrics_are_translation_invariant(seed in 0u64..10_000, dr in 0usize..4, dc in 0usize..4) {
        let mut r = rng(seed);
        // shapes kept in the interior so the shift never touches the edge
        let inner = |r: &mut rand_chacha::ChaCha8Rng| {
            let m = blob_mask(8, 8, r);
            LabelMask::from_fn(20, 20, move |i, j| (2..10).contains(&i) && (2..10).contains(&j) && m.is_fg(i - 2, j - 2))
        };
        let a = inner(&mut r);
        let b = inner(&mut r);
        let shift = |m: &LabelMask| LabelMask::from_fn(20, 20, |i, j| i >= dr && j >= dc && m.is_fg(i - dr, j - dc));
        let x = evaluate_pair(&a, &b).unwrap();
        let y = evaluate_pair(&shift(&a), &shift(&b)).unwrap();
        prop_assert_eq!(x, y);
    }
}
