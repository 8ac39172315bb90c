//! Raw loops behind the tape operations. All image data is `[C, H, W]`
//! row-major; convolution weights are `[C_out, C_in, K_h, K_w]`.

use alloc::format;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[c_in, h, w], &[c_out, kc, kh, kw]) = (x, k) else {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("input {x:?} must be [C,H,W] and kernel {k:?} [O,I,Kh,Kw]"),
            });
        };
        if kc != c_in {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("kernel expects {kc} input channels, input has {c_in}"),
            });
        }
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("degenerate kernel {kh}x{kw} or stride {stride}"),
            });
        }
        // Even kernels are only meaningful as non-overlapping, unpadded windows.
        let odd = kh % 2 == 1 && kw % 2 == 1;
        if !odd && pad != 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("even kernel {kh}x{kw} cannot be zero-padded"),
            });
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
            });
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Output index range `[lo, hi)` along one axis for which
    /// `o * stride + k - pad` lands inside `0..n`.
    fn range(&self, k: usize, n: usize, n_out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > k { (self.pad - k).div_ceil(s) } else { 0 };
        let top = n + self.pad;
        let hi = if top > k { ((top - k - 1) / s + 1).min(n_out) } else { 0 };
        (lo, hi.max(lo))
    }
}

/// `out += conv(x, k)`; `out` is `[C_out, Ho, Wo]`.
pub fn conv2d_accumulate(g: &ConvGeom, x: &[f64], k: &[f64], out: &mut [f64]) {
    let (plane_in, plane_out) = (g.h * g.w, g.ho * g.wo);
    for co in 0..g.c_out {
        let out_plane = &mut out[co * plane_out..(co + 1) * plane_out];
        for ci in 0..g.c_in {
            let in_plane = &x[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = g.range(ky, g.h, g.ho);
                for kx in 0..g.kw {
                    let wv = k[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = g.range(kx, g.w, g.wo);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let orow = &mut out_plane[oy * g.wo + ox_lo..oy * g.wo + ox_hi];
                        let irow = &in_plane[iy * g.w..(iy + 1) * g.w];
                        let ix0 = ox_lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            for (o, i) in orow.iter_mut().zip(&irow[ix0..ix0 + (ox_hi - ox_lo)]) {
                                *o += wv * i;
                            }
                        } else {
                            for (o, i) in orow.iter_mut().zip(irow[ix0..].iter().step_by(g.stride)) {
                                *o += wv * i;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out[co] += bias[co]` over every pixel.
pub fn add_bias(bias: &[f64], plane: usize, out: &mut [f64]) {
    for (co, &b) in bias.iter().enumerate() {
        for o in &mut out[co * plane..(co + 1) * plane] {
            *o += b;
        }
    }
}

/// `dx += conv_transpose(dy, k)`.
pub fn conv2d_input_grad(g: &ConvGeom, dy: &[f64], k: &[f64], dx: &mut [f64]) {
    let (plane_in, plane_out) = (g.h * g.w, g.ho * g.wo);
    for co in 0..g.c_out {
        let dy_plane = &dy[co * plane_out..(co + 1) * plane_out];
        for ci in 0..g.c_in {
            let dx_plane = &mut dx[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = g.range(ky, g.h, g.ho);
                for kx in 0..g.kw {
                    let wv = k[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi) = g.range(kx, g.w, g.wo);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let drow = &dy_plane[oy * g.wo + ox_lo..oy * g.wo + ox_hi];
                        let xrow = &mut dx_plane[iy * g.w..(iy + 1) * g.w];
                        let ix0 = ox_lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            for (xv, d) in xrow[ix0..ix0 + drow.len()].iter_mut().zip(drow) {
                                *xv += wv * d;
                            }
                        } else {
                            for (xv, d) in xrow[ix0..].iter_mut().step_by(g.stride).zip(drow) {
                                *xv += wv * d;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `dk += correlate(dy, x)`.
pub fn conv2d_kernel_grad(g: &ConvGeom, dy: &[f64], x: &[f64], dk: &mut [f64]) {
    let (plane_in, plane_out) = (g.h * g.w, g.ho * g.wo);
    for co in 0..g.c_out {
        let dy_plane = &dy[co * plane_out..(co + 1) * plane_out];
        for ci in 0..g.c_in {
            let in_plane = &x[ci * plane_in..(ci + 1) * plane_in];
            for ky in 0..g.kh {
                let (oy_lo, oy_hi) = g.range(ky, g.h, g.ho);
                for kx in 0..g.kw {
                    let (ox_lo, ox_hi) = g.range(kx, g.w, g.wo);
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let drow = &dy_plane[oy * g.wo + ox_lo..oy * g.wo + ox_hi];
                        let irow = &in_plane[iy * g.w..(iy + 1) * g.w];
                        let ix0 = ox_lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            acc += drow
                                .iter()
                                .zip(&irow[ix0..ix0 + drow.len()])
                                .map(|(d, i)| d * i)
                                .sum::<f64>();
                        } else {
                            acc += drow
                                .iter()
                                .zip(irow[ix0..].iter().step_by(g.stride))
                                .map(|(d, i)| d * i)
                                .sum::<f64>();
                        }
                    }
                    dk[((co * g.c_in + ci) * g.kh + ky) * g.kw + kx] += acc;
                }
            }
        }
    }
}

pub fn bias_grad(dy: &[f64], plane: usize, db: &mut [f64]) {
    for (co, b) in db.iter_mut().enumerate() {
        *b += dy[co * plane..(co + 1) * plane].iter().sum::<f64>();
    }
}

/// Nearest-neighbour x2 upsampling of `[C, H, W]` into `[C, 2H, 2W]`.
pub fn upsample2(x: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let w2 = 2 * w;
    for ch in 0..c {
        for y in 0..h {
            let src = &x[(ch * h + y) * w..(ch * h + y + 1) * w];
            let base = (ch * 2 * h + 2 * y) * w2;
            for (j, &v) in src.iter().enumerate() {
                out[base + 2 * j] = v;
                out[base + 2 * j + 1] = v;
                out[base + w2 + 2 * j] = v;
                out[base + w2 + 2 * j + 1] = v;
            }
        }
    }
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub fn upsample2_grad(dy: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let w2 = 2 * w;
    for ch in 0..c {
        for y in 0..h {
            let base = (ch * 2 * h + 2 * y) * w2;
            for j in 0..w {
                dx[(ch * h + y) * w + j] +=
                    dy[base + 2 * j] + dy[base + 2 * j + 1] + dy[base + w2 + 2 * j] + dy[base + w2 + 2 * j + 1];
            }
        }
    }
}

/// Softmax across the channel axis at every pixel.
pub fn softmax_channels(x: &[f64], c: usize, plane: usize, out: &mut [f64]) {
    for p in 0..plane {
        let mut m = f64::NEG_INFINITY;
        for ch in 0..c {
            m = m.max(x[ch * plane + p]);
        }
        let mut z = 0.0;
        for ch in 0..c {
            let e = libm::exp(x[ch * plane + p] - m);
            out[ch * plane + p] = e;
            z += e;
        }
        for ch in 0..c {
            out[ch * plane + p] /= z;
        }
    }
}

/// Log-sum-exp across channels at pixel `p`.
pub fn logsumexp_at(x: &[f64], c: usize, plane: usize, p: usize) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for ch in 0..c {
        m = m.max(x[ch * plane + p]);
    }
    let mut z = 0.0;
    for ch in 0..c {
        z += libm::exp(x[ch * plane + p] - m);
    }
    m + libm::log(z)
}
