#![allow(dead_code)]

use mlb_seg_core::data::Sample;
use mlb_seg_core::model::{model_forward, ModelParams, SegNet};
use mlb_seg_core::{LabelMask, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(&[1, h, w], |_| rng.random::<f64>())
}

pub fn random_mask(h: usize, w: usize, rng: &mut impl Rng) -> LabelMask {
    let data = (0..h * w).map(|_| rng.random_range(0..2u8)).collect();
    LabelMask::new(h, w, data).unwrap()
}

pub fn random_samples(count: usize, h: usize, w: usize, rng: &mut impl Rng) -> Vec<Sample> {
    (0..count)
        .map(|_| Sample {
            image: random_image(h, w, rng),
            mask: Some(random_mask(h, w, rng)),
        })
        .collect()
}

/// He-initialized parameters with small random biases, so that no bias
/// gradient is trivially structured.
pub fn random_params(width: usize, rng: &mut impl Rng) -> ModelParams {
    let mut p = SegNet::new(width).init(rng);
    for (name, t) in p.names().to_vec().iter().zip(p.tensors_mut()) {
        if name.ends_with(".bias") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    p
}

/// `|a - b| / max(|b|, floor)` over whole vectors.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(floor)
}

/// Per-pixel cross-entropy written out directly from the logits.
pub fn ce_loop(logits: &Tensor, target: &LabelMask) -> Vec<f64> {
    let (h, w) = target.hw();
    let plane = h * w;
    let z = logits.data();
    (0..plane)
        .map(|p| {
            let (a, b) = (z[p], z[plane + p]);
            let m = a.max(b);
            let lse = m + ((a - m).exp() + (b - m).exp()).ln();
            lse - z[target.data()[p] as usize * plane + p]
        })
        .collect()
}

/// Mean per-pixel cross-entropy over labeled samples, by explicit loops.
pub fn mean_ce_loop(params: &ModelParams, samples: &[Sample]) -> f64 {
    let mut total = 0.0;
    for s in samples {
        let z = model_forward(params, &s.image).unwrap();
        let l = ce_loop(&z, s.mask.as_ref().unwrap());
        total += l.iter().sum::<f64>() / l.len() as f64;
    }
    total / samples.len() as f64
}

/// Central finite-difference gradient of `f` over the flattened parameters.
pub fn fd_grad(params: &ModelParams, h: f64, f: impl Fn(&ModelParams) -> f64) -> Vec<f64> {
    let flat = params.flatten();
    (0..flat.len())
        .map(|i| {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let fp = f(&params.unflatten(&plus).unwrap());
            let fm = f(&params.unflatten(&minus).unwrap());
            (fp - fm) / (2.0 * h)
        })
        .collect()
}
