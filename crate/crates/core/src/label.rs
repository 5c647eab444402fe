//! Semantic label maps for person parsing. A label map stores one class id
//! per pixel; one-hot tensors are derived views used by the networks.
//!
//! Class table (stable across the whole pipeline and the on-disk format):
//!
//! | id | meaning            |
//! |----|--------------------|
//! | 0  | background         |
//! | 1  | hair               |
//! | 2  | face               |
//! | 3  | torso skin         |
//! | 4  | arms               |
//! | 5  | hands              |
//! | 6  | upper garment      |
//! | 7  | lower garment      |
//! | 8  | legs               |
//! | 9  | masked-out (clothing-agnostic region); also aligned garment in a
//! |    | divided map        |
//! | 10 | misaligned garment (divided maps only)                          |

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const HAIR: u8 = 1;
pub const FACE: u8 = 2;
pub const TORSO_SKIN: u8 = 3;
pub const ARMS: u8 = 4;
pub const HANDS: u8 = 5;
pub const UPPER: u8 = 6;
pub const LOWER: u8 = 7;
pub const LEGS: u8 = 8;
pub const AGNOSTIC: u8 = 9;
pub const MISALIGN: u8 = 10;

/// Number of classes a person parse can contain (0..=8).
pub const PARSE_CLASSES: usize = 9;
/// Classes in a clothing-agnostic parse (adds the masked-out class).
pub const AGNOSTIC_CLASSES: usize = 10;
/// Classes in a divided parse (garment split into aligned / misaligned).
pub const DIVIDED_CLASSES: usize = 11;

/// Multiplier used when a label map is stored as a grayscale byte image.
pub const LABEL_BYTE_STEP: u8 = 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!("label map {}x{} with {} bytes", h, w, data.len())));
        }
        Ok(LabelMap { h, w, data })
    }

    pub fn filled(h: usize, w: usize, v: u8) -> Self {
        LabelMap { h, w, data: vec![v; h * w] }
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    #[inline]
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }

    /// One-hot expansion to a [1, classes, H, W] tensor.
    pub fn one_hot<E: Element>(&self, classes: usize) -> Result<Tensor<E>> {
        if let Some(&m) = self.data.iter().find(|&&v| v as usize >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {} does not fit into {} classes",
                m, classes
            )));
        }
        let mut t = Tensor::zeros(&[1, classes, self.h, self.w]);
        for (i, &v) in self.data.iter().enumerate() {
            t.data_mut()[(v as usize) * self.h * self.w + i] = E::ONE;
        }
        Ok(t)
    }

    /// Per-pixel argmax over channels of a [N, C, H, W] tensor (first image).
    /// Ties resolve to the lowest class id.
    pub fn from_argmax<E: Element>(t: &Tensor<E>) -> Self {
        let (c, h, w) = (t.dim(1), t.dim(2), t.dim(3));
        let hw = h * w;
        let mut data = vec![0u8; hw];
        for p in 0..hw {
            let mut best = t.data()[p];
            let mut arg = 0u8;
            for ci in 1..c {
                let v = t.data()[ci * hw + p];
                if v > best {
                    best = v;
                    arg = ci as u8;
                }
            }
            data[p] = arg;
        }
        LabelMap { h, w, data }
    }

    /// Nearest-neighbor resize by exact integer factor, up or down.
    /// Downsampling picks the top-left pixel of each block.
    pub fn resize_nearest(&self, h2: usize, w2: usize) -> Result<Self> {
        let ok = (h2 % self.h == 0 && w2 % self.w == 0) || (self.h % h2 == 0 && self.w % w2 == 0);
        if !ok || h2 == 0 || w2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "nearest resize {}x{} -> {}x{} is not an integer factor",
                self.h, self.w, h2, w2
            )));
        }
        let mut data = vec![0u8; h2 * w2];
        for y in 0..h2 {
            let sy = y * self.h / h2;
            for x in 0..w2 {
                let sx = x * self.w / w2;
                data[y * w2 + x] = self.data[sy * self.w + sx];
            }
        }
        Ok(LabelMap { h: h2, w: w2, data })
    }

    /// Byte-image encoding (id * 20) for storage as grayscale PNG.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| v * LABEL_BYTE_STEP).collect()
    }

    pub fn from_bytes(h: usize, w: usize, bytes: &[u8]) -> Result<Self> {
        let mut data = Vec::with_capacity(bytes.len());
        for &b in bytes {
            if b % LABEL_BYTE_STEP != 0 {
                return Err(Error::Dataset(format!("byte {} is not a multiple of {}", b, LABEL_BYTE_STEP)));
            }
            data.push(b / LABEL_BYTE_STEP);
        }
        LabelMap::new(h, w, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_round_trips_through_argmax() {
        let m = LabelMap::new(2, 3, vec![0, 1, 2, 8, 3, 0]).unwrap();
        let t = m.one_hot::<f64>(PARSE_CLASSES).unwrap();
        assert_eq!(LabelMap::from_argmax(&t), m);
        // exactly one channel is hot per pixel
        for p in 0..6 {
            let s: f64 = (0..PARSE_CLASSES).map(|c| t.data()[c * 6 + p]).sum();
            assert_eq!(s, 1.0);
        }
    }

    #[test]
    fn one_hot_rejects_out_of_range_labels() {
        let m = LabelMap::new(1, 2, vec![0, 9]).unwrap();
        assert!(m.one_hot::<f64>(PARSE_CLASSES).is_err());
        assert!(m.one_hot::<f64>(AGNOSTIC_CLASSES).is_ok());
    }

    #[test]
    fn nearest_resize_doubles_and_halves_exactly() {
        let m = LabelMap::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        let up = m.resize_nearest(4, 4).unwrap();
        assert_eq!(up.get(0, 0), 1);
        assert_eq!(up.get(0, 1), 1);
        assert_eq!(up.get(3, 3), 4);
        let down = up.resize_nearest(2, 2).unwrap();
        assert_eq!(down, m);
    }

    #[test]
    fn byte_encoding_round_trips() {
        let m = LabelMap::new(1, 4, vec![0, 6, 9, 10]).unwrap();
        let b = m.to_bytes();
        assert_eq!(b, vec![0, 120, 180, 200]);
        assert_eq!(LabelMap::from_bytes(1, 4, &b).unwrap(), m);
        assert!(LabelMap::from_bytes(1, 1, &[7]).is_err());
    }
}
