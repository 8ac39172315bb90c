//! Synthetic shape-segmentation data and label corruption.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::metrics::distance_transform;
use crate::tensor::Tensor;

/// One image with an optional label mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[1, H, W]`
    pub image: Tensor,
    pub mask: Option<LabelMask>,
}

impl Sample {
    pub fn hw(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }

    /// The mask, or an error naming what needed it.
    pub fn label(&self, what: &'static str) -> Result<&LabelMask> {
        self.mask.as_ref().ok_or(Error::Empty(what))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Clean,
    Meta,
    Unlabeled,
    Initialized,
    Eval,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Clean,
        Split::Meta,
        Split::Unlabeled,
        Split::Initialized,
        Split::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::Clean => "clean",
            Split::Meta => "meta",
            Split::Unlabeled => "unlabeled",
            Split::Initialized => "initialized",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Common `(H, W)` of all samples, or an error if they differ.
    pub fn hw(&self) -> Result<(usize, usize)> {
        let first = self.samples.first().ok_or(Error::Empty("dataset"))?.hw();
        if let Some(s) = self.samples.iter().find(|s| s.hw() != first) {
            return Err(Error::InvalidShape {
                op: "dataset",
                msg: format!("mixed image sizes {first:?} and {:?}", s.hw()),
            });
        }
        Ok(first)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    Ellipse,
    Rect,
    Mixed,
}

impl FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipse" => Ok(Self::Ellipse),
            "rect" => Ok(Self::Rect),
            "mixed" => Ok(Self::Mixed),
            _ => Err(Error::Config(format!("unknown shape family `{s}`"))),
        }
    }
}

impl fmt::Display for ShapeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ellipse => "ellipse",
            Self::Rect => "rect",
            Self::Mixed => "mixed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub family: ShapeFamily,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Rect { cy: f64, cx: f64, hy: f64, hx: f64 },
}

impl Shape {
    fn contains(&self, r: usize, c: usize) -> bool {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        match *self {
            Shape::Ellipse { cy, cx, ry, rx } => {
                let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
                dy * dy + dx * dx <= 1.0
            }
            Shape::Rect { cy, cx, hy, hx } => libm::fabs(y - cy) <= hy && libm::fabs(x - cx) <= hx,
        }
    }
}

/// Labeled images with one to three shapes brighter than a flat
/// background, plus Gaussian pixel noise, clamped to `[0, 1]`. Masks are
/// exact shape interiors.
pub fn generate<R: Rng + ?Sized>(cfg: &GenConfig, split: Split, rng: &mut R) -> Result<Dataset> {
    let (h, w) = (cfg.height, cfg.width);
    if h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!("image size {h}x{w} must be even and nonzero")));
    }
    if cfg.count == 0 {
        return Err(Error::Config(String::from("sample count must be at least 1")));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Config(format!(
            "noise level must be non-negative, got {}",
            cfg.noise
        )));
    }
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(format!("{e}")))?;
    let (hf, wf) = (h as f64, w as f64);
    let small = hf.min(wf);
    let mut samples = Vec::with_capacity(cfg.count);
    for _ in 0..cfg.count {
        let background = rng.random_range(0.1..0.3);
        let n_shapes = rng.random_range(1..=3);
        let mut shapes = Vec::with_capacity(n_shapes);
        for _ in 0..n_shapes {
            let cy = rng.random_range(0.2..0.8) * hf;
            let cx = rng.random_range(0.2..0.8) * wf;
            let a = rng.random_range(0.1..0.25) * small;
            let b = rng.random_range(0.1..0.25) * small;
            let ellipse = match cfg.family {
                ShapeFamily::Ellipse => true,
                ShapeFamily::Rect => false,
                ShapeFamily::Mixed => rng.random_bool(0.5),
            };
            let shape = if ellipse {
                Shape::Ellipse { cy, cx, ry: a, rx: b }
            } else {
                Shape::Rect { cy, cx, hy: a, hx: b }
            };
            shapes.push((shape, rng.random_range(0.3..0.5)));
        }
        let mut mask = Vec::with_capacity(h * w);
        let mut img = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let offset = shapes
                    .iter()
                    .filter(|(s, _)| s.contains(r, c))
                    .map(|&(_, o)| o)
                    .fold(0.0, f64::max);
                mask.push((offset > 0.0) as u8);
                let n = if cfg.noise > 0.0 { noise.sample(rng) } else { 0.0 };
                img.push((background + offset + n).clamp(0.0, 1.0));
            }
        }
        samples.push(Sample {
            image: Tensor::new(alloc::vec![1, h, w], img)?,
            mask: Some(LabelMask::new(h, w, mask)?),
        });
    }
    Ok(Dataset { split, samples })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Corruption {
    pub dilate_r: f64,
    pub erode_r: f64,
    /// Flip probability for pixels near the original boundary.
    pub flip_rate: f64,
}

/// Half-width of the flip band around the boundary, in pixels.
pub const FLIP_BAND: f64 = 2.0;

/// Distance from every pixel to the nearest pixel of the other class.
pub fn distance_to_other_class(mask: &LabelMask) -> Vec<f64> {
    let (h, w) = mask.hw();
    let fg: Vec<bool> = mask.data().iter().map(|&v| v != 0).collect();
    let bg: Vec<bool> = fg.iter().map(|v| !v).collect();
    let (to_fg, to_bg) = (distance_transform(&fg, h, w), distance_transform(&bg, h, w));
    fg.iter()
        .enumerate()
        .map(|(i, &f)| if f { to_bg[i] } else { to_fg[i] })
        .collect()
}

/// Dilate, then erode, by Euclidean disks, then flip each pixel within
/// [`FLIP_BAND`] of the original boundary with probability `flip_rate`.
pub fn corrupt_mask<R: Rng + ?Sized>(mask: &LabelMask, c: &Corruption, rng: &mut R) -> Result<LabelMask> {
    if !(0.0..=1.0).contains(&c.flip_rate)
        || c.dilate_r.is_nan()
        || c.dilate_r < 0.0
        || c.erode_r.is_nan()
        || c.erode_r < 0.0
    {
        return Err(Error::Config(format!("invalid corruption {c:?}")));
    }
    let (h, w) = mask.hw();
    let mut out = mask.clone();
    if c.dilate_r > 0.0 {
        let fg: Vec<bool> = out.data().iter().map(|&v| v != 0).collect();
        let d = distance_transform(&fg, h, w);
        out = LabelMask::new(h, w, d.iter().map(|&v| (v <= c.dilate_r) as u8).collect())?;
    }
    if c.erode_r > 0.0 {
        let bg: Vec<bool> = out.data().iter().map(|&v| v == 0).collect();
        let d = distance_transform(&bg, h, w);
        let data = out
            .data()
            .iter()
            .zip(&d)
            .map(|(&v, &dist)| (v != 0 && dist > c.erode_r) as u8)
            .collect();
        out = LabelMask::new(h, w, data)?;
    }
    if c.flip_rate > 0.0 {
        let dist = distance_to_other_class(mask);
        for (i, &d) in dist.iter().enumerate() {
            if d <= FLIP_BAND && rng.random_bool(c.flip_rate) {
                let (r, col) = (i / w, i % w);
                out.set(r, col, 1 - out.get(r, col));
            }
        }
    }
    Ok(out)
}
