use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::NUM_CLASSES;

/// An `H x W` map of class indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::ShapeMismatch {
                op: "label mask",
                got: vec![data.len()],
                expected: vec![h, w],
            });
        }
        if let Some(&value) = data.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::LabelOutOfRange {
                value,
                classes: NUM_CLASSES,
            });
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, class: u8) -> Self {
        assert!((class as usize) < NUM_CLASSES);
        Self {
            h,
            w,
            data: vec![class; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(f(r, c) as u8);
            }
        }
        Self { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: u8) {
        debug_assert!((v as usize) < NUM_CLASSES);
        self.data[r * self.w + c] = v;
    }

    pub fn is_fg(&self, r: usize, c: usize) -> bool {
        self.get(r, c) != 0
    }

    pub fn count_fg(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}
