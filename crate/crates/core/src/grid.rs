//! Pixel index maps between 2D grids.

use alloc::vec::Vec;

/// A partial map from an output grid to an input grid: output pixel `i`
/// reads input pixel `src[i]`, or is filled with zero when `src[i]` is
/// `None`. Applied independently to every channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMap {
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub src: Vec<Option<usize>>,
}

impl IndexMap {
    pub fn from_fn(
        in_hw: (usize, usize),
        out_hw: (usize, usize),
        f: impl Fn(usize, usize) -> Option<(usize, usize)>,
    ) -> Self {
        let mut src = Vec::with_capacity(out_hw.0 * out_hw.1);
        for r in 0..out_hw.0 {
            for c in 0..out_hw.1 {
                src.push(f(r, c).map(|(ir, ic)| {
                    debug_assert!(ir < in_hw.0 && ic < in_hw.1);
                    ir * in_hw.1 + ic
                }));
            }
        }
        Self { in_hw, out_hw, src }
    }

    pub fn identity(hw: (usize, usize)) -> Self {
        Self {
            in_hw: hw,
            out_hw: hw,
            src: (0..hw.0 * hw.1).map(Some).collect(),
        }
    }

    /// `self` applied after `first`: reads through `first`, then `self`.
    pub fn after(&self, first: &IndexMap) -> IndexMap {
        debug_assert_eq!(self.in_hw, first.out_hw);
        IndexMap {
            in_hw: first.in_hw,
            out_hw: self.out_hw,
            src: self.src.iter().map(|s| s.and_then(|i| first.src[i])).collect(),
        }
    }

    /// Output pixels that read real data.
    pub fn valid(&self) -> Vec<bool> {
        self.src.iter().map(Option::is_some).collect()
    }

    pub fn apply(&self, x: &[f64], channels: usize, out: &mut [f64]) {
        let (pi, po) = (self.in_hw.0 * self.in_hw.1, self.out_hw.0 * self.out_hw.1);
        for c in 0..channels {
            let (xi, xo) = (&x[c * pi..(c + 1) * pi], &mut out[c * po..(c + 1) * po]);
            for (o, s) in xo.iter_mut().zip(&self.src) {
                *o = s.map_or(0.0, |i| xi[i]);
            }
        }
    }

    /// Adjoint of [`IndexMap::apply`]: scatter-add back onto the input grid.
    pub fn scatter_add(&self, dy: &[f64], channels: usize, dx: &mut [f64]) {
        let (pi, po) = (self.in_hw.0 * self.in_hw.1, self.out_hw.0 * self.out_hw.1);
        for c in 0..channels {
            let (di, dout) = (&mut dx[c * pi..(c + 1) * pi], &dy[c * po..(c + 1) * po]);
            for (d, s) in dout.iter().zip(&self.src) {
                if let Some(i) = s {
                    di[*i] += d;
                }
            }
        }
    }
}
