//! Binary masks and the alignment algebra used to split a predicted garment
//! region into the part covered by the warped garment and the part the
//! warp failed to reach.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<u8>, // strictly 0 or 1
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!("mask {}x{} with {} bytes", h, w, data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Mask { h, w, data })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![0; h * w] }
    }

    pub fn filled(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![1; h * w] }
    }

    /// Pixels of a label map equal to `label`.
    pub fn from_label(map: &LabelMap, label: u8) -> Self {
        Mask {
            h: map.h(),
            w: map.w(),
            data: map.data().iter().map(|&v| u8::from(v == label)).collect(),
        }
    }

    /// Threshold a single-channel tensor plane at 0.5.
    pub fn from_tensor<E: Element>(t: &Tensor<E>) -> Self {
        let (h, w) = (t.dim(t.rank() - 2), t.dim(t.rank() - 1));
        let half = E::from_f64(0.5);
        Mask { h, w, data: t.data().iter().map(|&v| u8::from(v > half)).collect() }
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
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x] == 1
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = u8::from(v);
    }

    #[inline]
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    fn zip(&self, o: &Mask, f: impl Fn(u8, u8) -> u8) -> Mask {
        assert_eq!((self.h, self.w), (o.h, o.w), "mask size mismatch");
        Mask {
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(o.data.iter()).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn and(&self, o: &Mask) -> Mask {
        self.zip(o, |a, b| a & b)
    }

    pub fn or(&self, o: &Mask) -> Mask {
        self.zip(o, |a, b| a | b)
    }

    /// Set difference: pixels in `self` and not in `o`.
    pub fn minus(&self, o: &Mask) -> Mask {
        self.zip(o, |a, b| a & (1 - b))
    }

    pub fn is_subset_of(&self, o: &Mask) -> bool {
        self.data.iter().zip(o.data.iter()).all(|(&a, &b)| a <= b)
    }

    /// Morphological dilation by a (2r+1)x(2r+1) square element, done as two
    /// separable sliding-window passes.
    pub fn dilate_square(&self, r: usize) -> Mask {
        if r == 0 {
            return self.clone();
        }
        let mut horiz = vec![0u8; self.h * self.w];
        for y in 0..self.h {
            let row = &self.data[y * self.w..(y + 1) * self.w];
            let out = &mut horiz[y * self.w..(y + 1) * self.w];
            for x in 0..self.w {
                let lo = x.saturating_sub(r);
                let hi = (x + r).min(self.w - 1);
                out[x] = u8::from(row[lo..=hi].iter().any(|&v| v == 1));
            }
        }
        let mut data = vec![0u8; self.h * self.w];
        for y in 0..self.h {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(self.h - 1);
            for x in 0..self.w {
                data[y * self.w + x] = u8::from((lo..=hi).any(|yy| horiz[yy * self.w + x] == 1));
            }
        }
        Mask { h: self.h, w: self.w, data }
    }

    /// Single-channel float view [1, 1, H, W].
    pub fn to_tensor<E: Element>(&self) -> Tensor<E> {
        Tensor::new(
            &[1, 1, self.h, self.w],
            self.data.iter().map(|&v| if v == 1 { E::ONE } else { E::ZERO }).collect(),
        )
        .expect("sizes agree")
    }

    /// Nearest-neighbor resize by exact integer factor (see LabelMap).
    pub fn resize_nearest(&self, h2: usize, w2: usize) -> Result<Mask> {
        let as_labels = LabelMap::new(self.h, self.w, self.data.clone())?;
        let r = as_labels.resize_nearest(h2, w2)?;
        Ok(Mask { h: h2, w: w2, data: r.data().to_vec() })
    }
}

/// Outcome of intersecting a target garment region with the warped garment
/// mask: `align` is covered by the warp, `misalign` is the remainder the
/// generator must fill.
#[derive(Debug, Clone)]
pub struct AlignmentSplit {
    pub align: Mask,
    pub misalign: Mask,
}

/// align = target ∩ warped, misalign = target − align.
pub fn split_alignment(target: &Mask, warped: &Mask) -> AlignmentSplit {
    let align = target.and(warped);
    let misalign = target.minus(&align);
    AlignmentSplit { align, misalign }
}

/// Rewrite the garment class of a parse into aligned / misaligned classes.
/// Every garment pixel must be claimed by exactly one half of the split.
pub fn divide_parse(parse: &LabelMap, garment_label: u8, split: &AlignmentSplit) -> Result<LabelMap> {
    let mut out = parse.clone();
    for y in 0..parse.h() {
        for x in 0..parse.w() {
            let is_garment = parse.get(y, x) == garment_label;
            let a = split.align.get(y, x);
            let m = split.misalign.get(y, x);
            if is_garment != (a || m) || (a && m) {
                return Err(Error::InvalidArgument(format!(
                    "split does not partition the garment region at ({}, {})",
                    y, x
                )));
            }
            if a {
                out.set(y, x, crate::label::AGNOSTIC);
            } else if m {
                out.set(y, x, crate::label::MISALIGN);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_mask(r: &mut rand_chacha::ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
        let data = (0..h * w).map(|_| u8::from(r.gen::<f64>() < p)).collect();
        Mask::new(h, w, data).unwrap()
    }

    #[test]
    fn split_partitions_the_target_region() {
        let mut r = crate::rng::stream(31, "mask-split");
        for trial in 0..200 {
            let target = random_mask(&mut r, 16, 12, 0.4);
            let warped = random_mask(&mut r, 16, 12, 0.5);
            let s = split_alignment(&target, &warped);
            // the two halves partition the target exactly
            assert_eq!(s.align.or(&s.misalign), target, "trial {}", trial);
            assert!(s.align.and(&s.misalign).is_empty());
            assert_eq!(s.align.count() + s.misalign.count(), target.count());
            // each half stays inside its defining sets
            assert!(s.align.is_subset_of(&target));
            assert!(s.align.is_subset_of(&warped));
            assert!(s.misalign.is_subset_of(&target));
            assert!(s.misalign.and(&warped).is_empty());
        }
    }

    #[test]
    fn full_coverage_leaves_no_misalignment() {
        let mut r = crate::rng::stream(32, "mask-full");
        let target = random_mask(&mut r, 8, 8, 0.5);
        let s = split_alignment(&target, &Mask::filled(8, 8));
        assert!(s.misalign.is_empty());
        assert_eq!(s.align, target);
        let s = split_alignment(&target, &Mask::empty(8, 8));
        assert!(s.align.is_empty());
        assert_eq!(s.misalign, target);
    }

    #[test]
    fn dilation_grows_monotonically_and_caps_at_full() {
        let mut m = Mask::empty(9, 9);
        m.set(4, 4, true);
        let d1 = m.dilate_square(1);
        assert_eq!(d1.count(), 9); // 3x3 square
        let d2 = m.dilate_square(2);
        assert_eq!(d2.count(), 25);
        assert!(d1.is_subset_of(&d2));
        assert_eq!(m.dilate_square(10), Mask::filled(9, 9));
        assert!(Mask::empty(5, 5).dilate_square(3).is_empty());
    }

    #[test]
    fn dilation_clips_at_borders() {
        let mut m = Mask::empty(5, 5);
        m.set(0, 0, true);
        assert_eq!(m.dilate_square(1).count(), 4); // 2x2 corner
    }

    #[test]
    fn divide_parse_rewrites_garment_classes() {
        use crate::label;
        let parse = LabelMap::new(2, 2, vec![label::UPPER, label::UPPER, label::FACE, label::BACKGROUND]).unwrap();
        let target = Mask::from_label(&parse, label::UPPER);
        let mut warped = Mask::empty(2, 2);
        warped.set(0, 0, true);
        let s = split_alignment(&target, &warped);
        let divided = divide_parse(&parse, label::UPPER, &s).unwrap();
        assert_eq!(divided.get(0, 0), label::AGNOSTIC);
        assert_eq!(divided.get(0, 1), label::MISALIGN);
        assert_eq!(divided.get(1, 0), label::FACE);
        assert_eq!(divided.get(1, 1), label::BACKGROUND);
    }

    #[test]
    fn divide_parse_rejects_foreign_split() {
        use crate::label;
        let parse = LabelMap::new(1, 2, vec![label::UPPER, label::FACE]).unwrap();
        let mut align = Mask::empty(1, 2);
        align.set(0, 1, true); // claims a non-garment pixel
        let split = AlignmentSplit { align, misalign: Mask::empty(1, 2) };
        assert!(divide_parse(&parse, label::UPPER, &split).is_err());
    }
}
