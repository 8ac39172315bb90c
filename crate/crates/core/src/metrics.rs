//! Overlap and surface-distance metrics for binary masks (nonzero is
//! foreground). Distances are in pixel units.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mask::LabelMask;

fn check_same(a: &LabelMask, b: &LabelMask, op: &'static str) -> Result<()> {
    if a.hw() != b.hw() {
        return Err(Error::ShapeMismatch {
            op,
            got: vec![a.height(), a.width()],
            expected: vec![b.height(), b.width()],
        });
    }
    Ok(())
}

fn overlap(pred: &LabelMask, gt: &LabelMask) -> (usize, usize, usize) {
    let mut inter = 0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if p != 0 && g != 0 {
            inter += 1;
        }
    }
    (inter, pred.count_fg(), gt.count_fg())
}

/// `2|A ∩ B| / (|A| + |B|)`, 1 when both are empty.
pub fn dice(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    check_same(pred, gt, "dice")?;
    let (i, a, b) = overlap(pred, gt);
    Ok(if a + b == 0 {
        1.0
    } else {
        2.0 * i as f64 / (a + b) as f64
    })
}

/// `|A ∩ B| / |A ∪ B|`, 1 when both are empty.
pub fn jaccard(pred: &LabelMask, gt: &LabelMask) -> Result<f64> {
    check_same(pred, gt, "jaccard")?;
    let (i, a, b) = overlap(pred, gt);
    let union = a + b - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

/// Foreground pixels with a 4-neighbour in the background or on the image
/// edge.
pub fn boundary(mask: &LabelMask) -> Vec<bool> {
    let (h, w) = mask.hw();
    let mut out = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            if !mask.is_fg(r, c) {
                continue;
            }
            let edge = r == 0 || c == 0 || r == h - 1 || c == w - 1;
            out[r * w + c] = edge
                || !mask.is_fg(r - 1, c)
                || !mask.is_fg(r + 1, c)
                || !mask.is_fg(r, c - 1)
                || !mask.is_fg(r, c + 1);
        }
    }
    out
}

/// Exact Euclidean distance from every pixel to the nearest `true` pixel
/// of `sites` (lower envelope of parabolas, separable by axis). `inf` when
/// there are no sites.
pub fn distance_transform(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    let big = f64::INFINITY;
    let mut sq: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { big }).collect();
    let n = h.max(w);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for c in 0..w {
        for r in 0..h {
            f[r] = sq[r * w + c];
        }
        envelope_1d(&f[..h], &mut d[..h], &mut v, &mut z);
        for r in 0..h {
            sq[r * w + c] = d[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&sq[r * w..(r + 1) * w]);
        envelope_1d(&f[..w], &mut d[..w], &mut v, &mut z);
        sq[r * w..(r + 1) * w].copy_from_slice(&d[..w]);
    }
    sq.into_iter().map(libm::sqrt).collect()
}

fn envelope_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let Some(first) = f.iter().position(|x| x.is_finite()) else {
        d.fill(f64::INFINITY);
        return;
    };
    let mut k = 0;
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] is -inf, so this stops at k == 0 at the latest
            if s > z[k] {
                break;
            }
            k -= 1;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *out = dq * dq + f[v[k]];
    }
}

/// Boundary-to-boundary distances between two masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceDistances {
    pub hd: f64,
    pub hd95: f64,
    /// Mean over the pooled directed distances of both boundaries.
    pub asd: f64,
    /// Mean distance from the prediction boundary to the reference boundary.
    pub asd_pred_to_gt: f64,
    pub asd_gt_to_pred: f64,
    /// Exactly one boundary is empty; distances are `inf`.
    pub degenerate: bool,
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], pct: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = pct / 100.0 * (v.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn surface_distances(pred: &LabelMask, gt: &LabelMask) -> Result<SurfaceDistances> {
    check_same(pred, gt, "surface_distances")?;
    let (h, w) = pred.hw();
    let (ba, bb) = (boundary(pred), boundary(gt));
    let (na, nb) = (ba.iter().filter(|&&b| b).count(), bb.iter().filter(|&&b| b).count());
    if na == 0 && nb == 0 {
        return Ok(SurfaceDistances {
            hd: 0.0,
            hd95: 0.0,
            asd: 0.0,
            asd_pred_to_gt: 0.0,
            asd_gt_to_pred: 0.0,
            degenerate: false,
        });
    }
    if na == 0 || nb == 0 {
        let inf = f64::INFINITY;
        return Ok(SurfaceDistances {
            hd: inf,
            hd95: inf,
            asd: inf,
            asd_pred_to_gt: inf,
            asd_gt_to_pred: inf,
            degenerate: true,
        });
    }
    let (dt_a, dt_b) = (distance_transform(&ba, h, w), distance_transform(&bb, h, w));
    let a_to_b: Vec<f64> = (0..h * w).filter(|&i| ba[i]).map(|i| dt_b[i]).collect();
    let b_to_a: Vec<f64> = (0..h * w).filter(|&i| bb[i]).map(|i| dt_a[i]).collect();
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    let (sa, sb): (f64, f64) = (a_to_b.iter().sum(), b_to_a.iter().sum());
    Ok(SurfaceDistances {
        hd: max(&a_to_b).max(max(&b_to_a)),
        hd95: percentile(&a_to_b, 95.0).max(percentile(&b_to_a, 95.0)),
        asd: (sa + sb) / (na + nb) as f64,
        asd_pred_to_gt: sa / na as f64,
        asd_gt_to_pred: sb / nb as f64,
        degenerate: false,
    })
}

/// All metrics for one prediction/reference pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub dice: f64,
    pub jaccard: f64,
    pub hd: f64,
    pub hd95: f64,
    pub asd: f64,
    pub degenerate: bool,
}

pub fn evaluate_pair(pred: &LabelMask, gt: &LabelMask) -> Result<MetricsReport> {
    let s = surface_distances(pred, gt)?;
    Ok(MetricsReport {
        dice: dice(pred, gt)?,
        jaccard: jaccard(pred, gt)?,
        hd: s.hd,
        hd95: s.hd95,
        asd: s.asd,
        degenerate: s.degenerate,
    })
}

/// Averages over a set of cases. Distance means skip degenerate cases,
/// which are counted separately.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsSummary {
    pub dice: f64,
    pub jaccard: f64,
    pub hd: f64,
    pub hd95: f64,
    pub asd: f64,
    pub cases: usize,
    pub degenerate: usize,
}

pub fn summarize(reports: &[MetricsReport]) -> MetricsSummary {
    let n = reports.len().max(1) as f64;
    let ok: Vec<&MetricsReport> = reports.iter().filter(|r| !r.degenerate).collect();
    let m = ok.len();
    let mean = |f: fn(&MetricsReport) -> f64| {
        if m == 0 {
            f64::INFINITY
        } else {
            ok.iter().map(|r| f(r)).sum::<f64>() / m as f64
        }
    };
    MetricsSummary {
        dice: reports.iter().map(|r| r.dice).sum::<f64>() / n,
        jaccard: reports.iter().map(|r| r.jaccard).sum::<f64>() / n,
        hd: mean(|r| r.hd),
        hd95: mean(|r| r.hd95),
        asd: mean(|r| r.asd),
        cases: reports.len(),
        degenerate: reports.len() - m,
    }
}
