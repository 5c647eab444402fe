//! Dense row-major tensors. Feature maps use NCHW layout throughout; the
//! hot loops index raw slices, so this type stays deliberately thin.

use crate::element::Element;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![E::ZERO; n] }
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(|i| f(i)).collect() }
    }

    pub fn scalar(v: E) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[E] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    // ---- NCHW helpers -------------------------------------------------

    /// (height*width) plane offset of image `n`, channel `c` in a 4-D tensor.
    #[inline]
    pub fn plane_offset(&self, n: usize, c: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        let (ch, h, w) = (self.shape[1], self.shape[2], self.shape[3]);
        ((n * ch) + c) * h * w
    }

    /// Borrow the HW plane of image `n`, channel `c`.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[E] {
        let hw = self.shape[2] * self.shape[3];
        let off = self.plane_offset(n, c);
        &self.data[off..off + hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [E] {
        let hw = self.shape[2] * self.shape[3];
        let off = self.plane_offset(n, c);
        &mut self.data[off..off + hw]
    }

    #[inline]
    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> E {
        let (_, ch, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[(((n * ch) + c) * h + y) * w + x]
    }

    #[inline]
    pub fn set4(&mut self, n: usize, c: usize, y: usize, x: usize, v: E) {
        let (_, ch, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[(((n * ch) + c) * h + y) * w + x] = v;
    }

    // ---- elementwise --------------------------------------------------

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn map_inplace(&mut self, f: impl Fn(E) -> E) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "zip of {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn add_scaled_assign(&mut self, other: &Self, k: E) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b * k;
        }
    }

    pub fn scale(&self, k: E) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> E {
        let mut s = E::ZERO;
        for &v in &self.data {
            s += v;
        }
        s
    }

    pub fn mean(&self) -> E {
        self.sum() / E::from_usize(self.data.len().max(1))
    }

    pub fn abs_max(&self) -> E {
        let mut m = E::ZERO;
        for &v in &self.data {
            m = m.maxv(v.abs());
        }
        m
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert elements to another precision.
    pub fn convert<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
        }
    }

    /// Concatenate along the channel axis (axis 1 of NCHW).
    pub fn concat_channels(parts: &[&Tensor<E>]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let (n, h, w) = (parts[0].dim(0), parts[0].dim(2), parts[0].dim(3));
        let mut c_total = 0;
        for p in parts {
            if p.rank() != 4 || p.dim(0) != n || p.dim(2) != h || p.dim(3) != w {
                return Err(Error::Shape(format!(
                    "concat_channels expects matching N/H/W, got {:?} vs {:?}",
                    parts[0].shape, p.shape
                )));
            }
            c_total += p.dim(1);
        }
        let mut out = Tensor::zeros(&[n, c_total, h, w]);
        for ni in 0..n {
            let mut c_off = 0;
            for p in parts {
                for ci in 0..p.dim(1) {
                    out.plane_mut(ni, c_off + ci).copy_from_slice(p.plane(ni, ci));
                }
                c_off += p.dim(1);
            }
        }
        Ok(out)
    }

    /// Concatenate along the batch axis (axis 0 of NCHW).
    pub fn concat_batch(parts: &[&Tensor<E>]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let (c, h, w) = (parts[0].dim(1), parts[0].dim(2), parts[0].dim(3));
        let mut n_total = 0;
        for p in parts {
            if p.rank() != 4 || p.dim(1) != c || p.dim(2) != h || p.dim(3) != w {
                return Err(Error::Shape(format!(
                    "concat_batch expects matching C/H/W, got {:?} vs {:?}",
                    parts[0].shape, p.shape
                )));
            }
            n_total += p.dim(0);
        }
        let mut data = Vec::with_capacity(n_total * c * h * w);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Tensor::new(&[n_total, c, h, w], data)
    }

    /// Extract sample `n` as a [1, C, H, W] tensor.
    pub fn slice_batch(&self, n: usize) -> Result<Self> {
        if self.rank() != 4 || n >= self.dim(0) {
            return Err(Error::Shape(format!("slice_batch {} of {:?}", n, self.shape)));
        }
        let per = self.numel() / self.dim(0);
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::new(&shape, self.data[n * per..(n + 1) * per].to_vec())
    }

    /// Slice `count` channels starting at `start` (axis 1 of NCHW).
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Self> {
        if self.rank() != 4 || start + count > self.dim(1) {
            return Err(Error::Shape(format!(
                "slice_channels {}..{} of {:?}",
                start,
                start + count,
                self.shape
            )));
        }
        let (n, h, w) = (self.dim(0), self.dim(2), self.dim(3));
        let mut out = Tensor::zeros(&[n, count, h, w]);
        for ni in 0..n {
            for ci in 0..count {
                out.plane_mut(ni, ci).copy_from_slice(self.plane(ni, start + ci));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_concat_and_slice_are_inverses() {
        let a = Tensor::<f64>::from_fn(&[1, 2, 2, 3], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[2, 2, 2, 3], |i| 100.0 + i as f64);
        let cat = Tensor::concat_batch(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[3, 2, 2, 3]);
        assert_eq!(cat.slice_batch(0).unwrap().data(), a.data());
        assert_eq!(cat.slice_batch(1).unwrap().data(), b.slice_batch(0).unwrap().data());
        assert_eq!(cat.slice_batch(2).unwrap().data(), b.slice_batch(1).unwrap().data());
        assert!(cat.slice_batch(3).is_err());
        let c = Tensor::<f64>::zeros(&[1, 3, 2, 3]);
        assert!(Tensor::concat_batch(&[&a, &c]).is_err(), "channel mismatch");
    }
}
