//! Dense f32 tensors in row-major layout.
//!
//! `Tensor` is a plain value type: shape plus data. Gradient bookkeeping
//! lives in [`crate::graph`], which stores tensors in tape slots together
//! with their `requires_grad` flag and gradient buffer.

use crate::{Error, Result};

/// N-dimensional f32 array, row-major. Images are `[1, H, W]` (IR, luma) or
/// `[3, H, W]` (RGB); conv weights are `[C_out, C_in, K, K]`; planes `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len() == product(shape)`.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Single-element tensor (rank 1, shape `[1]`).
    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 2D plane `[H, W]` from row-major data.
    pub fn plane(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![h, w], data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Interprets the tensor as `[C, H, W]`; a `[H, W]` plane counts as one
    /// channel.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [c, h, w] => Ok((*c, *h, *w)),
            [h, w] => Ok((1, *h, *w)),
            other => Err(Error::Dimension(format!(
                "expected [C,H,W] or [H,W] tensor, got shape {:?}",
                other
            ))),
        }
    }

    /// Reshapes without copying; element count must match.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Channel `c` of a `[C, H, W]` tensor as a `[H, W]` plane.
    pub fn channel(&self, c: usize) -> Result<Tensor> {
        let (ch, h, w) = self.chw()?;
        if c >= ch {
            return Err(Error::Dimension(format!(
                "channel {} out of range for {} channels",
                c, ch
            )));
        }
        let plane = h * w;
        Tensor::new(vec![h, w], self.data[c * plane..(c + 1) * plane].to_vec())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors unless every element is finite; `what` names the tensor in the
    /// message.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            let bad = self.data.iter().position(|v| !v.is_finite()).unwrap_or(0);
            Err(Error::Numeric(format!(
                "{}: non-finite value {} at flat index {}",
                what, self.data[bad], bad
            )))
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Mean in f64 (deterministic left-to-right accumulation).
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn chw_accepts_planes() {
        let t = Tensor::zeros(&[4, 5]);
        assert_eq!(t.chw().unwrap(), (1, 4, 5));
        let t = Tensor::zeros(&[2, 4, 5]);
        assert_eq!(t.chw().unwrap(), (2, 4, 5));
        assert!(Tensor::zeros(&[2, 2, 4, 5]).chw().is_err());
    }

    #[test]
    fn channel_extracts_plane() {
        let t = Tensor::from_fn(&[2, 2, 2], |i| i as f32);
        let c1 = t.channel(1).unwrap();
        assert_eq!(c1.shape(), &[2, 2]);
        assert_eq!(c1.data(), &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn ensure_finite_flags_nan() {
        let mut t = Tensor::zeros(&[3]);
        t.data_mut()[1] = f32::NAN;
        assert!(t.ensure_finite("t").is_err());
    }
}
