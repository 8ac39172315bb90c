//! The segmentation network and its per-pixel losses.
//!
//! A one-stage encoder/decoder with a skip connection:
//!
//! ```text
//! x ─ conv3x3 ─ relu ─ conv3x3 ─ relu ─┬─ conv2x2/2 ─ relu ─ [conv3x3 ─ relu]x2 ─ up x2 ─┐
//!      (F)             (F)             │   (2F)                (2F)                      │
//!                                      └──────────────── skip ───────────────── concat (3F)
//!                                                      ─ [conv3x3 ─ relu]x2 (F) ─ conv1x1 ─ logits (2)
//! ```
//!
//! The downsampling kernel is 2x2 with stride 2 so that the network commutes
//! with flips and quarter turns when its kernels share those symmetries.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use crate::NUM_CLASSES;

/// Ordered, named parameter tensors. Also used for anything with the same
/// layout: gradients, momentum buffers, tangent directions.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        let (names, tensors) = entries.into_iter().unzip();
        Self { names, tensors }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn check_layout(&self, other: &Self) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch(format!(
                "{} tensors ({} values) vs {} tensors ({} values)",
                self.tensors.len(),
                self.numel(),
                other.tensors.len(),
                other.numel()
            )))
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Rebuild a parameter set with this layout from flat values.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.numel() {
            return Err(Error::LayoutMismatch(format!(
                "{} values for a layout of {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut off = 0;
        let mut tensors = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            tensors.push(Tensor::new(t.shape().to_vec(), flat[off..off + t.len()].to_vec())?);
            off += t.len();
        }
        Ok(Self {
            names: self.names.clone(),
            tensors,
        })
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: f64, other: &Self) {
        debug_assert!(self.same_layout(other));
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(k, b);
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.scale(k)).collect(),
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.tensors.iter().zip(&other.tensors).map(|(a, b)| a.dot(b)).sum()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.dot(self))
    }

    /// Record every tensor as a leaf: differentiable when `trainable`,
    /// constant otherwise.
    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> Result<ParamVars> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect::<Result<_>>()?;
        Ok(ParamVars(vars))
    }
}

/// Tape handles of a [`ModelParams`], in layout order.
#[derive(Debug, Clone)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    /// Wrap handles already on a tape, in layout order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Collect the gradient for each parameter, zero where unreached.
    pub fn gradient(&self, layout: &ModelParams, grads: &Gradients, tape: &Tape) -> ModelParams {
        ModelParams {
            names: layout.names.clone(),
            tensors: self.0.iter().map(|&v| grads.get_or_zeros(v, tape)).collect(),
        }
    }

    /// Tangent seeds pairing each parameter with a direction tensor.
    pub fn seeds<'a>(&self, direction: &'a ModelParams) -> Result<Vec<(Var, &'a Tensor)>> {
        if direction.tensors.len() != self.0.len() {
            return Err(Error::LayoutMismatch(format!(
                "direction has {} tensors, model has {}",
                direction.tensors.len(),
                self.0.len()
            )));
        }
        Ok(self.0.iter().copied().zip(direction.tensors.iter()).collect())
    }
}

const LAYERS: [&str; 8] = ["enc1", "enc2", "down", "mid1", "mid2", "dec1", "dec2", "head"];

/// Architecture description of the encoder/decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegNet {
    pub width: usize,
}

impl SegNet {
    pub fn new(width: usize) -> Self {
        Self { width }
    }

    /// `(layer, [C_out, C_in, K, K])` for every convolution in order.
    pub fn kernel_shapes(&self) -> [(&'static str, [usize; 4]); 8] {
        let f = self.width;
        [
            ("enc1", [f, 1, 3, 3]),
            ("enc2", [f, f, 3, 3]),
            ("down", [2 * f, f, 2, 2]),
            ("mid1", [2 * f, 2 * f, 3, 3]),
            ("mid2", [2 * f, 2 * f, 3, 3]),
            ("dec1", [f, 3 * f, 3, 3]),
            ("dec2", [f, f, 3, 3]),
            ("head", [NUM_CLASSES, f, 1, 1]),
        ]
    }

    pub fn zeros(&self) -> ModelParams {
        self.build(|_, shape| Tensor::zeros(shape))
    }

    /// He-normal kernels, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelParams {
        self.build(|is_kernel, shape| {
            if !is_kernel {
                return Tensor::zeros(shape);
            }
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let normal = Normal::new(0.0, libm::sqrt(2.0 / fan_in)).expect("positive std");
            Tensor::from_fn(shape, |_| normal.sample(rng))
        })
    }

    fn build(&self, mut make: impl FnMut(bool, &[usize]) -> Tensor) -> ModelParams {
        let mut entries = Vec::with_capacity(16);
        for (name, k) in self.kernel_shapes() {
            entries.push((format!("{name}.weight"), make(true, &k)));
            entries.push((format!("{name}.bias"), make(false, &[k[0]])));
        }
        ModelParams::new(entries)
    }

    /// Recover the architecture from a parameter set, checking its layout.
    pub fn from_params(params: &ModelParams) -> Result<Self> {
        let k = params
            .get("enc1.weight")
            .ok_or_else(|| Error::LayoutMismatch("missing enc1.weight".to_string()))?;
        let net = Self::new(k.shape()[0]);
        params.check_layout(&net.zeros())?;
        Ok(net)
    }
}

/// Record `f(image; params)` on a tape and return the `[2, H, W]` logits.
pub fn forward_on_tape(tape: &mut Tape, p: &ParamVars, image: Var) -> Result<Var> {
    let (c, h, w) = tape.value(image).chw("model_forward")?;
    if c != 1 {
        return Err(Error::InvalidShape {
            op: "model_forward",
            msg: format!("expected a single-channel image, got {c} channels"),
        });
    }
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::InvalidShape {
            op: "model_forward",
            msg: format!("image {h}x{w} must have even, nonzero height and width"),
        });
    }
    if p.0.len() != 2 * LAYERS.len() {
        return Err(Error::LayoutMismatch(format!(
            "expected 16 parameter tensors, got {}",
            p.0.len()
        )));
    }
    let layer = |i: usize| (p.0[2 * i], Some(p.0[2 * i + 1]));
    let conv_relu = |tape: &mut Tape, x: Var, i: usize, stride: usize, pad: usize| -> Result<Var> {
        let (k, b) = layer(i);
        let y = tape.conv2d(x, k, b, stride, pad)?;
        tape.relu(y)
    };
    let e1 = conv_relu(tape, image, 0, 1, 1)?;
    let e2 = conv_relu(tape, e1, 1, 1, 1)?;
    let d = conv_relu(tape, e2, 2, 2, 0)?;
    let m1 = conv_relu(tape, d, 3, 1, 1)?;
    let m2 = conv_relu(tape, m1, 4, 1, 1)?;
    let up = tape.upsample2(m2)?;
    let cat = tape.concat(up, e2)?;
    let h1 = conv_relu(tape, cat, 5, 1, 1)?;
    let h2 = conv_relu(tape, h1, 6, 1, 1)?;
    let (k, b) = layer(7);
    tape.conv2d(h2, k, b, 1, 0)
}

/// `f(image; params)`: `[1, H, W]` image to `[2, H, W]` logits.
pub fn model_forward(params: &ModelParams, image: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = params.on_tape(&mut tape, false)?;
    let x = tape.constant(image.clone())?;
    let y = forward_on_tape(&mut tape, &p, x)?;
    Ok(tape.value(y).clone())
}

/// Per-pixel argmax over classes, ties going to the lower class index.
pub fn pseudo_label(logits: &Tensor) -> Result<LabelMask> {
    let (c, h, w) = logits.chw("pseudo_label")?;
    let plane = h * w;
    let z = logits.data();
    let data = (0..plane)
        .map(|p| {
            let mut best = 0;
            for ch in 1..c {
                if z[ch * plane + p] > z[best * plane + p] {
                    best = ch;
                }
            }
            best as u8
        })
        .collect();
    LabelMask::new(h, w, data)
}

/// `L[r, s] = -log softmax(logits)[target[r, s], r, s]`.
pub fn per_pixel_ce(logits: &Tensor, target: &LabelMask) -> Result<Tensor> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone())?;
    let l = tape.cross_entropy(z, target)?;
    Ok(tape.value(l).clone())
}

/// `sum_j sum_{r,s} (w^n o L^n + w^p o L^p)` over a batch of loss maps.
pub fn weighted_bootstrap_loss(
    lossmaps_n: &[Tensor],
    lossmaps_p: &[Tensor],
    weights: &[crate::meta::WeightMapPair],
) -> Result<f64> {
    if lossmaps_n.len() != weights.len() || lossmaps_p.len() != weights.len() {
        return Err(Error::ShapeMismatch {
            op: "weighted_bootstrap_loss",
            got: vec![lossmaps_n.len(), lossmaps_p.len()],
            expected: vec![weights.len(), weights.len()],
        });
    }
    let mut total = 0.0;
    for ((ln, lp), wm) in lossmaps_n.iter().zip(lossmaps_p).zip(weights) {
        let a = ln.zip_with(&wm.n, "weighted_bootstrap_loss", |l, w| l * w)?;
        let b = lp.zip_with(&wm.p, "weighted_bootstrap_loss", |l, w| l * w)?;
        total += a.sum() + b.sum();
    }
    Ok(total)
}
