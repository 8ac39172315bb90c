//! Pseudo-label enhancement: invertible grid augmentations, ensembled
//! pseudo labels, and the pairwise augmentation consistency loss.
//!
//! Augmentations only move pixels on the grid (flips, quarter turns,
//! border crop/pad), so `invert(apply(x)) == x` holds exactly wherever the
//! validity mask is set.

use alloc::format;
use alloc::string::ToString;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::IndexMap;
use crate::mask::LabelMask;
use crate::model::{forward_on_tape, ModelParams, ParamVars};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Augmentation {
    Identity,
    FlipH,
    FlipV,
    /// Quarter turn counter-clockwise.
    Rot90,
    /// Quarter turn clockwise.
    Rot270,
    /// Crop `k` pixels from every border.
    ZoomIn(usize),
    /// Zero-pad `k` pixels on every border.
    ZoomOut(usize),
}

impl fmt::Display for Augmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => f.write_str("identity"),
            Self::FlipH => f.write_str("flip-h"),
            Self::FlipV => f.write_str("flip-v"),
            Self::Rot90 => f.write_str("rot90"),
            Self::Rot270 => f.write_str("rot270"),
            Self::ZoomIn(k) => write!(f, "zoom-in:{k}"),
            Self::ZoomOut(k) => write!(f, "zoom-out:{k}"),
        }
    }
}

impl FromStr for Augmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Augmentation(s.to_string());
        Ok(match s {
            "identity" => Self::Identity,
            "flip-h" => Self::FlipH,
            "flip-v" => Self::FlipV,
            "rot90" => Self::Rot90,
            "rot270" => Self::Rot270,
            _ => {
                let (kind, k) = s.split_once(':').ok_or_else(bad)?;
                let k: usize = k.parse().map_err(|_| bad())?;
                if k == 0 {
                    return Err(bad());
                }
                match kind {
                    "zoom-in" => Self::ZoomIn(k),
                    "zoom-out" => Self::ZoomOut(k),
                    _ => return Err(bad()),
                }
            }
        })
    }
}

/// Parse a comma-separated augmentation list; blank means none.
pub fn parse_specs(s: &str) -> Result<Vec<Augmentation>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

impl Augmentation {
    /// Grid size after the transform.
    pub fn aug_hw(&self, (h, w): (usize, usize)) -> Result<(usize, usize)> {
        match *self {
            Self::Rot90 | Self::Rot270 => Ok((w, h)),
            Self::ZoomIn(k) => {
                if h <= 2 * k || w <= 2 * k {
                    return Err(Error::InvalidShape {
                        op: "augment",
                        msg: format!("cannot crop {k} pixels from a {h}x{w} grid"),
                    });
                }
                Ok((h - 2 * k, w - 2 * k))
            }
            Self::ZoomOut(k) => Ok((h + 2 * k, w + 2 * k)),
            _ => Ok((h, w)),
        }
    }

    /// Original grid size given the transformed one.
    pub fn orig_hw(&self, (h, w): (usize, usize)) -> Result<(usize, usize)> {
        match *self {
            Self::Rot90 | Self::Rot270 => Ok((w, h)),
            Self::ZoomIn(k) => Ok((h + 2 * k, w + 2 * k)),
            Self::ZoomOut(k) => {
                if h <= 2 * k || w <= 2 * k {
                    return Err(Error::InvalidShape {
                        op: "invert",
                        msg: format!("{h}x{w} grid is too small to undo a {k}-pixel pad"),
                    });
                }
                Ok((h - 2 * k, w - 2 * k))
            }
            _ => Ok((h, w)),
        }
    }

    /// Index map from the original grid to the augmented grid.
    pub fn forward_map(&self, hw: (usize, usize)) -> Result<IndexMap> {
        let (h, w) = hw;
        let out = self.aug_hw(hw)?;
        Ok(match *self {
            Self::Identity => IndexMap::identity(hw),
            Self::FlipH => IndexMap::from_fn(hw, out, |r, c| Some((r, w - 1 - c))),
            Self::FlipV => IndexMap::from_fn(hw, out, |r, c| Some((h - 1 - r, c))),
            Self::Rot90 => IndexMap::from_fn(hw, out, |r, c| Some((c, w - 1 - r))),
            Self::Rot270 => IndexMap::from_fn(hw, out, |r, c| Some((h - 1 - c, r))),
            Self::ZoomIn(k) => IndexMap::from_fn(hw, out, |r, c| Some((r + k, c + k))),
            Self::ZoomOut(k) => IndexMap::from_fn(hw, out, |r, c| {
                let inside = r >= k && c >= k && r - k < h && c - k < w;
                inside.then(|| (r - k, c - k))
            }),
        })
    }

    /// Index map from the augmented grid back to an original `hw` grid.
    pub fn inverse_map(&self, hw: (usize, usize)) -> Result<IndexMap> {
        let aug = self.aug_hw(hw)?;
        let (ha, wa) = aug;
        Ok(match *self {
            Self::Identity => IndexMap::identity(hw),
            Self::FlipH => IndexMap::from_fn(aug, hw, |r, c| Some((r, wa - 1 - c))),
            Self::FlipV => IndexMap::from_fn(aug, hw, |r, c| Some((ha - 1 - r, c))),
            Self::Rot90 => IndexMap::from_fn(aug, hw, |r, c| Some((ha - 1 - c, r))),
            Self::Rot270 => IndexMap::from_fn(aug, hw, |r, c| Some((c, wa - 1 - r))),
            Self::ZoomIn(k) => IndexMap::from_fn(aug, hw, |r, c| {
                let inside = r >= k && c >= k && r - k < ha && c - k < wa;
                inside.then(|| (r - k, c - k))
            }),
            Self::ZoomOut(k) => IndexMap::from_fn(aug, hw, |r, c| Some((r + k, c + k))),
        })
    }

    /// Original-grid pixels on which `invert(apply(x)) == x`.
    pub fn validity(&self, hw: (usize, usize)) -> Result<Vec<bool>> {
        let round = self.inverse_map(hw)?.after(&self.forward_map(hw)?);
        Ok(round.src.iter().enumerate().map(|(i, s)| *s == Some(i)).collect())
    }

    /// `tau(t)` for a `[C, H, W]` tensor.
    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        let (c, h, w) = t.chw("augment")?;
        remap(t, c, &self.forward_map((h, w))?)
    }

    /// `tau^-1(t)` for a `[C, H', W']` tensor on the augmented grid.
    pub fn invert(&self, t: &Tensor) -> Result<Tensor> {
        let (c, h, w) = t.chw("invert")?;
        let orig = self.orig_hw((h, w))?;
        remap(t, c, &self.inverse_map(orig)?)
    }
}

fn remap(t: &Tensor, c: usize, map: &IndexMap) -> Result<Tensor> {
    let mut out = vec![0.0; c * map.out_hw.0 * map.out_hw.1];
    map.apply(t.data(), c, &mut out);
    Tensor::new(vec![c, map.out_hw.0, map.out_hw.1], out)
}

fn probabilities(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.on_tape(&mut tape, false)?;
    let xv = tape.constant(x.clone())?;
    let z = forward_on_tape(&mut tape, &p, xv)?;
    let s = tape.softmax(z)?;
    Ok(tape.value(s).clone())
}

/// Argmax of the averaged class probabilities of the original input and
/// every inverse-transformed augmented prediction. Each pixel averages only
/// the predictions that are valid there. Ties go to the lower class.
pub fn ensemble_pseudo_label(params: &ModelParams, x: &Tensor, specs: &[Augmentation]) -> Result<LabelMask> {
    let (_, h, w) = x.chw("ensemble_pseudo_label")?;
    let plane = h * w;
    let mut acc = probabilities(params, x)?;
    let c = acc.shape()[0];
    let mut count = vec![1.0; plane];
    // Canonical order makes the sum independent of list order.
    let mut ordered = specs.to_vec();
    ordered.sort();
    for spec in &ordered {
        let probs = probabilities(params, &spec.apply(x)?)?;
        let inv = spec.inverse_map((h, w))?;
        let mut back = vec![0.0; c * plane];
        inv.apply(probs.data(), c, &mut back);
        let valid = inv.valid();
        for ch in 0..c {
            for p in (0..plane).filter(|&p| valid[p]) {
                acc.data_mut()[ch * plane + p] += back[ch * plane + p];
            }
        }
        for (n, _) in count.iter_mut().zip(&valid).filter(|(_, v)| **v) {
            *n += 1.0;
        }
    }
    for ch in 0..c {
        for (v, n) in acc.data_mut()[ch * plane..(ch + 1) * plane].iter_mut().zip(&count) {
            *v /= n;
        }
    }
    crate::model::pseudo_label(&acc)
}

/// Record the pairwise consistency loss on `tape`:
///
/// `2 / ((Q+1) Q) * 1/(HW) * sum_{q<v} sum_{r,s} |P_q - tau_q(tau_v^-1(P_v))|^2`
///
/// over the probability fields of the original input (member 0) and the
/// `Q` augmented inputs, restricted to pixels where the composed map reads
/// real data. `base_logits`, when given, is reused as member 0.
pub fn aug_consistency_on_tape(
    tape: &mut Tape,
    params: &ParamVars,
    x: &Tensor,
    specs: &[Augmentation],
    base_logits: Option<Var>,
) -> Result<Var> {
    if specs.is_empty() {
        return Err(Error::Config(
            "augmentation consistency needs at least one augmentation".to_string(),
        ));
    }
    let (_, h, w) = x.chw("aug_consistency_loss")?;
    let hw = (h, w);
    let q = specs.len();
    let members: Vec<Augmentation> = core::iter::once(Augmentation::Identity)
        .chain(specs.iter().copied())
        .collect();
    let mut probs = Vec::with_capacity(q + 1);
    for (m, spec) in members.iter().enumerate() {
        let logits = match (m, base_logits) {
            (0, Some(z)) => z,
            _ => {
                let xa = tape.constant(spec.apply(x)?)?;
                forward_on_tape(tape, params, xa)?
            }
        };
        probs.push(tape.softmax(logits)?);
    }
    let c = tape.value(probs[0]).shape()[0];
    let fwd: Vec<IndexMap> = members.iter().map(|s| s.forward_map(hw)).collect::<Result<_>>()?;
    let inv: Vec<IndexMap> = members.iter().map(|s| s.inverse_map(hw)).collect::<Result<_>>()?;
    let mut terms = Vec::with_capacity(q * (q + 1) / 2);
    for a in 0..=q {
        for b in a + 1..=q {
            let map = fwd[a].after(&inv[b]);
            let valid = map.valid();
            let mask = Tensor::from_fn(&[c, map.out_hw.0, map.out_hw.1], |i| {
                valid[i % valid.len()] as u8 as f64
            });
            let moved = tape.gather(probs[b], Arc::new(map))?;
            let kept = tape.mul_const(probs[a], mask)?;
            let diff = tape.sub(kept, moved)?;
            let sq = tape.square(diff)?;
            terms.push(tape.sum(sq)?);
        }
    }
    let total = tape.add_all(&terms)?.expect("at least one pair");
    let norm = 2.0 / ((q + 1) * q) as f64 / (h * w) as f64;
    tape.scale(total, norm)
}

/// Value of the pairwise augmentation consistency loss.
pub fn aug_consistency_loss(params: &ModelParams, x: &Tensor, specs: &[Augmentation]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = params.on_tape(&mut tape, false)?;
    let l = aug_consistency_on_tape(&mut tape, &p, x, specs, None)?;
    Ok(tape.value(l).item())
}

/// Value and parameter gradient of the pairwise consistency loss.
pub fn aug_consistency_grad(params: &ModelParams, x: &Tensor, specs: &[Augmentation]) -> Result<(f64, ModelParams)> {
    let mut tape = Tape::new();
    let p = params.on_tape(&mut tape, true)?;
    let l = aug_consistency_on_tape(&mut tape, &p, x, specs, None)?;
    let g = tape.backward(l)?;
    Ok((tape.value(l).item(), p.gradient(params, &g, &tape)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[2, h, w], |i| i as f64)
    }

    #[test]
    fn spec_strings_round_trip() {
        for s in [
            "flip-h",
            "flip-v",
            "rot90",
            "rot270",
            "zoom-in:2",
            "zoom-out:3",
            "identity",
        ] {
            let a: Augmentation = s.parse().unwrap();
            assert_eq!(a.to_string(), s);
        }
        for bad in ["zoom-in", "zoom-in:0", "zoom-in:x", "spin", "zoom:2"] {
            assert!(bad.parse::<Augmentation>().is_err(), "{bad}");
        }
        assert_eq!(
            parse_specs("zoom-in:2, zoom-out:2 ,flip-h").unwrap(),
            vec![Augmentation::ZoomIn(2), Augmentation::ZoomOut(2), Augmentation::FlipH]
        );
        assert!(parse_specs("").unwrap().is_empty());
    }

    #[test]
    fn flips_are_involutions() {
        let x = ramp(4, 6);
        for a in [Augmentation::FlipH, Augmentation::FlipV] {
            assert_eq!(a.apply(&a.apply(&x).unwrap()).unwrap(), x);
        }
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let x = ramp(4, 6);
        let mut y = x.clone();
        for _ in 0..4 {
            y = Augmentation::Rot90.apply(&y).unwrap();
        }
        assert_eq!(y, x);
        let r = Augmentation::Rot90.apply(&x).unwrap();
        assert_eq!(r.shape(), &[2, 6, 4]);
        assert_eq!(Augmentation::Rot270.apply(&r).unwrap(), x);
    }

    #[test]
    fn rot90_turns_counter_clockwise() {
        // [[0, 1], [2, 3]] -> [[1, 3], [0, 2]]
        let x = Tensor::from_fn(&[1, 2, 2], |i| i as f64);
        assert_eq!(Augmentation::Rot90.apply(&x).unwrap().data(), &[1.0, 3.0, 0.0, 2.0]);
    }

    #[test]
    fn rigid_transforms_are_valid_everywhere() {
        for a in [
            Augmentation::Identity,
            Augmentation::FlipH,
            Augmentation::FlipV,
            Augmentation::Rot90,
            Augmentation::Rot270,
            Augmentation::ZoomOut(2),
        ] {
            assert!(a.validity((4, 6)).unwrap().iter().all(|&v| v), "{a}");
        }
    }

    #[test]
    fn zoom_in_round_trip_is_exact_on_its_mask() {
        let (h, w, k) = (8, 6, 2);
        let x = ramp(h, w);
        let a = Augmentation::ZoomIn(k);
        let y = a.invert(&a.apply(&x).unwrap()).unwrap();
        let valid = a.validity((h, w)).unwrap();
        for r in 0..h {
            for c in 0..w {
                let inside = r >= k && r < h - k && c >= k && c < w - k;
                assert_eq!(valid[r * w + c], inside);
                for ch in 0..2 {
                    let i = (ch * h + r) * w + c;
                    if inside {
                        assert_eq!(y.data()[i], x.data()[i]);
                    } else {
                        assert_eq!(y.data()[i], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn zoom_out_pads_with_zeros() {
        let x = Tensor::full(&[1, 2, 2], 1.0);
        let y = Augmentation::ZoomOut(1).apply(&x).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        assert_eq!(y.sum(), 4.0);
        assert_eq!(Augmentation::ZoomOut(1).invert(&y).unwrap(), x);
    }

    #[test]
    fn oversized_crop_is_rejected() {
        assert!(Augmentation::ZoomIn(2).apply(&ramp(4, 8)).is_err());
    }

    #[test]
    fn consistency_without_augmentations_is_an_error() {
        let params = crate::model::SegNet::new(1).zeros();
        assert!(aug_consistency_loss(&params, &Tensor::zeros(&[1, 4, 4]), &[]).is_err());
    }
}
