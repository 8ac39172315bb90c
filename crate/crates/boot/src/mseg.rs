//! MSEG sample files.
//!
//! ```text
//! offset 0   b"MSEG"
//!        4   u32 version (1)
//!        8   u32 count
//!       12   u32 H
//!       16   u32 W
//!       20   count records: H*W f32 image, u8 mask flag, H*W u8 mask if flag == 1
//! ```
//!
//! All integers and floats are little-endian. Images are stored as `f32`,
//! so only values that are exactly representable in `f32` round-trip
//! bit-exactly.

use std::fs;
use std::path::Path;

use mlb_seg_core::data::{Dataset, Sample, Split};
use mlb_seg_core::{LabelMask, Tensor, NUM_CLASSES};

use crate::error::{io_err, BootError, Result};

pub const MAGIC: [u8; 4] = *b"MSEG";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic at offset {offset}: found byte {found:#04x}, expected {expected:#04x}")]
    BadMagic { offset: usize, found: u8, expected: u8 },
    #[error("unsupported version {found} at offset 4")]
    Version { found: u32 },
    #[error("truncated at offset {offset}: {what} needs {needed} bytes, {available} left")]
    Truncated {
        offset: usize,
        what: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("invalid mask flag {flag} at offset {offset}")]
    MaskFlag { offset: usize, flag: u8 },
    #[error("label {value} at offset {offset} is not a valid class")]
    Label { offset: usize, value: u8 },
    #[error("non-finite pixel at offset {offset}")]
    NonFinite { offset: usize },
    #[error("{extra} trailing bytes after offset {offset}")]
    Trailing { offset: usize, extra: usize },
    #[error("grid {height}x{width} is empty or too large")]
    Dimensions { height: u32, width: u32 },
    #[error("record {index} is {got:?}, file grid is {expected:?}")]
    Shape {
        index: usize,
        got: (usize, usize),
        expected: (usize, usize),
    },
}

/// Size in bytes of a file with `labeled` masked and `unlabeled` unmasked
/// records.
pub fn file_len(height: usize, width: usize, labeled: usize, unlabeled: usize) -> usize {
    let px = height * width;
    HEADER_LEN + labeled * (px * 4 + 1 + px) + unlabeled * (px * 4 + 1)
}

/// Serialize samples whose images are `[1, height, width]`.
pub fn encode(height: usize, width: usize, samples: &[Sample]) -> std::result::Result<Vec<u8>, FormatError> {
    let dims = |h: usize, w: usize| FormatError::Dimensions {
        height: h.try_into().unwrap_or(u32::MAX),
        width: w.try_into().unwrap_or(u32::MAX),
    };
    let (h32, w32) = match (u32::try_from(height), u32::try_from(width)) {
        (Ok(h), Ok(w)) if h > 0 && w > 0 => (h, w),
        _ => return Err(dims(height, width)),
    };
    let count = u32::try_from(samples.len()).map_err(|_| dims(height, width))?;
    let labeled = samples.iter().filter(|s| s.mask.is_some()).count();
    let mut out = Vec::with_capacity(file_len(height, width, labeled, samples.len() - labeled));
    out.extend_from_slice(&MAGIC);
    for v in [VERSION, count, h32, w32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (index, s) in samples.iter().enumerate() {
        let got = (
            s.image.shape().get(1).copied().unwrap_or(0),
            s.image.shape().get(2).copied().unwrap_or(0),
        );
        if s.image.shape() != [1, height, width] || s.mask.as_ref().is_some_and(|m| m.hw() != (height, width)) {
            return Err(FormatError::Shape {
                index,
                got,
                expected: (height, width),
            });
        }
        for &v in s.image.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        match &s.mask {
            Some(m) => {
                out.push(1);
                out.extend_from_slice(m.data());
            }
            None => out.push(0),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], FormatError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(FormatError::Truncated {
                offset: self.pos,
                what,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> std::result::Result<u32, FormatError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parsed file contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Decoded, FormatError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if let Some(i) = (0..4).find(|&i| magic[i] != MAGIC[i]) {
        return Err(FormatError::BadMagic {
            offset: i,
            found: magic[i],
            expected: MAGIC[i],
        });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(FormatError::Version { found: version });
    }
    let count = cur.u32("count")? as usize;
    let (h32, w32) = (cur.u32("height")?, cur.u32("width")?);
    let (height, width) = (h32 as usize, w32 as usize);
    if height == 0 || width == 0 {
        return Err(FormatError::Dimensions {
            height: h32,
            width: w32,
        });
    }
    // Check the first image fits before trusting the header with an allocation.
    let image_bytes = height.checked_mul(width).and_then(|p| p.checked_mul(4));
    let available = bytes.len() - cur.pos;
    let px = match image_bytes {
        Some(n) if count == 0 || n <= available => n / 4,
        _ if count == 0 => 0,
        n => {
            return Err(FormatError::Truncated {
                offset: cur.pos,
                what: "image",
                needed: n.unwrap_or(usize::MAX),
                available,
            })
        }
    };
    let mut samples = Vec::with_capacity(count.min(available / (px * 4 + 1).max(1)));
    for _ in 0..count {
        let start = cur.pos;
        let raw = cur.take(px * 4, "image")?;
        let mut img = Vec::with_capacity(px);
        for (i, c) in raw.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if !v.is_finite() {
                return Err(FormatError::NonFinite { offset: start + 4 * i });
            }
            img.push(f64::from(v));
        }
        let flag_at = cur.pos;
        let flag = cur.take(1, "mask flag")?[0];
        let mask = match flag {
            0 => None,
            1 => {
                let at = cur.pos;
                let m = cur.take(px, "mask")?;
                if let Some(i) = m.iter().position(|&v| v as usize >= NUM_CLASSES) {
                    return Err(FormatError::Label {
                        offset: at + i,
                        value: m[i],
                    });
                }
                Some(LabelMask::new(height, width, m.to_vec()).expect("length checked"))
            }
            flag => return Err(FormatError::MaskFlag { offset: flag_at, flag }),
        };
        samples.push(Sample {
            image: Tensor::new(vec![1, height, width], img).expect("length checked"),
            mask,
        });
    }
    if cur.pos != bytes.len() {
        return Err(FormatError::Trailing {
            offset: cur.pos,
            extra: bytes.len() - cur.pos,
        });
    }
    Ok(Decoded { height, width, samples })
}

pub fn save(path: &Path, dataset: &Dataset) -> Result<()> {
    let (h, w) = dataset.hw()?;
    save_samples(path, h, w, &dataset.samples)
}

pub fn save_samples(path: &Path, height: usize, width: usize, samples: &[Sample]) -> Result<()> {
    let bytes = encode(height, width, samples).map_err(|source| BootError::Format {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_samples(path: &Path) -> Result<Decoded> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes).map_err(|source| BootError::Format {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path, split: Split) -> Result<Dataset> {
    Ok(Dataset {
        split,
        samples: load_samples(path)?.samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize, labeled: bool, k: usize) -> Sample {
        Sample {
            image: Tensor::from_fn(&[1, h, w], |i| ((i + k) % 7) as f64 * 0.125),
            mask: labeled.then(|| LabelMask::from_fn(h, w, |r, c| (r + c + k).is_multiple_of(3))),
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode(2, 3, &[sample(2, 3, true, 0)]).unwrap();
        assert_eq!(&bytes[..4], b"MSEG");
        assert_eq!(bytes[4..8], 1u32.to_le_bytes());
        assert_eq!(bytes[8..12], 1u32.to_le_bytes());
        assert_eq!(bytes[12..16], 2u32.to_le_bytes());
        assert_eq!(bytes[16..20], 3u32.to_le_bytes());
        assert_eq!(bytes[20 + 24], 1);
        assert_eq!(bytes.len(), file_len(2, 3, 1, 0));
    }

    #[test]
    fn mixed_records_round_trip() {
        let samples = vec![sample(4, 2, true, 1), sample(4, 2, false, 2), sample(4, 2, true, 3)];
        let bytes = encode(4, 2, &samples).unwrap();
        assert_eq!(bytes.len(), file_len(4, 2, 2, 1));
        let d = decode(&bytes).unwrap();
        assert_eq!((d.height, d.width), (4, 2));
        assert_eq!(d.samples, samples);
    }

    #[test]
    fn empty_file_keeps_its_grid() {
        let d = decode(&encode(8, 8, &[]).unwrap()).unwrap();
        assert_eq!((d.height, d.width, d.samples.len()), (8, 8, 0));
    }

    #[test]
    fn version_and_flag_errors() {
        let mut bytes = encode(2, 2, &[sample(2, 2, false, 0)]).unwrap();
        bytes[4] = 2;
        assert_eq!(decode(&bytes), Err(FormatError::Version { found: 2 }));
        bytes[4] = 1;
        bytes[20 + 16] = 7;
        assert_eq!(decode(&bytes), Err(FormatError::MaskFlag { offset: 36, flag: 7 }));
    }

    #[test]
    fn bad_labels_and_pixels_name_their_offset() {
        let mut bytes = encode(2, 2, &[sample(2, 2, true, 0)]).unwrap();
        bytes[20 + 16 + 1 + 3] = 2;
        assert_eq!(decode(&bytes), Err(FormatError::Label { offset: 40, value: 2 }));
        let mut bytes = encode(2, 2, &[sample(2, 2, false, 0)]).unwrap();
        bytes[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(decode(&bytes), Err(FormatError::NonFinite { offset: 24 }));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = encode(2, 2, &[sample(2, 2, false, 0)]).unwrap();
        bytes.push(0);
        assert_eq!(decode(&bytes), Err(FormatError::Trailing { offset: 37, extra: 1 }));
    }

    #[test]
    fn shape_mismatch_is_rejected_on_encode() {
        assert!(matches!(
            encode(2, 2, &[sample(2, 3, false, 0)]),
            Err(FormatError::Shape { index: 0, .. })
        ));
        assert!(encode(0, 2, &[]).is_err());
    }

    #[test]
    fn huge_grid_in_header_is_truncation_not_allocation() {
        let mut bytes = encode(2, 2, &[sample(2, 2, false, 0)]).unwrap();
        bytes[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(FormatError::Truncated { offset: 20, .. })));
    }
}
