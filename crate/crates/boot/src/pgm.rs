//! Binary greyscale (P5) images.

use std::fs;
use std::path::Path;

use crate::error::{io_err, BootError, Result};

pub fn encode(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height || width == 0 || height == 0 {
        return Err(BootError::Invalid(format!(
            "pgm: {} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Scale non-negative maps so the largest value across all of them is 255,
/// laying them out left to right with a one-pixel black gap.
pub fn render_row(maps: &[&[f64]], height: usize, width: usize) -> (usize, usize, Vec<u8>) {
    let n = maps.len();
    let max = maps.iter().flat_map(|m| m.iter().copied()).fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let total_w = n * width + n.saturating_sub(1);
    let mut px = vec![0u8; total_w * height];
    for (k, m) in maps.iter().enumerate() {
        for r in 0..height {
            for c in 0..width {
                let v = (m[r * width + c].max(0.0) * scale).round();
                px[r * total_w + k * (width + 1) + c] = v.min(255.0) as u8;
            }
        }
    }
    (total_w, height, px)
}

pub fn save(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode(width, height, pixels)?).map_err(io_err(path))
}
