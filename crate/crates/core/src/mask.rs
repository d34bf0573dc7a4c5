use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary `H x W` mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

/// Normalized `(cx, cy, w, h)` box.
pub type BoxCxCyWh = [f64; 4];

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::LengthMismatch {
                expected: height * width,
                actual: data.len(),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, data }
    }

    /// `value > threshold` per element of an `[H, W]` (or `[H, W, 1]`) tensor.
    pub fn from_threshold(t: &Tensor, threshold: f64) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [h, w] | [h, w, 1] => (h, w),
            _ => return Err(Error::shape("mask", format!("{:?}", t.shape()))),
        };
        Ok(Self {
            height: h,
            width: w,
            data: t.data().iter().map(|&v| v > threshold).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&b| b as u8 as f64).collect();
        Tensor::new(&[self.height, self.width], data).expect("mask dims")
    }

    /// Tight box in normalized `(cx, cy, w, h)`, treating each pixel as a unit
    /// square; `None` for an empty mask.
    pub fn tight_box(&self) -> Option<BoxCxCyWh> {
        let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    y0 = y0.min(y);
                    y1 = y1.max(y + 1);
                    x0 = x0.min(x);
                    x1 = x1.max(x + 1);
                }
            }
        }
        (y0 != usize::MAX).then(|| {
            let (w, h) = (self.width as f64, self.height as f64);
            [
                (x0 + x1) as f64 / 2.0 / w,
                (y0 + y1) as f64 / 2.0 / h,
                (x1 - x0) as f64 / w,
                (y1 - y0) as f64 / h,
            ]
        })
    }

    /// Nearest-neighbour downsampling, sampling pixel `f·i + f/2`.
    pub fn downsample_nearest(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::shape(
                "downsample_nearest",
                format!("{}x{} by {factor}", self.height, self.width),
            ));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        Ok(Self::from_fn(h, w, |y, x| {
            self.get(y * factor + factor / 2, x * factor + factor / 2)
        }))
    }
}

/// A length-`T` sequence of equally sized binary masks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSequence {
    frames: Vec<Mask>,
}

impl MaskSequence {
    pub fn new(frames: Vec<Mask>) -> Result<Self> {
        if let Some(first) = frames.first() {
            if frames.iter().any(|m| m.dims() != first.dims()) {
                return Err(Error::shape("mask_sequence", "frames differ in extent"));
            }
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Mask] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.frames.first().map(Mask::dims)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tight_box_of_block() {
        let m = Mask::from_fn(10, 20, |y, x| (2..5).contains(&y) && (4..10).contains(&x));
        let b = m.tight_box().unwrap();
        assert_eq!(b, [7.0 / 20.0, 3.5 / 10.0, 6.0 / 20.0, 3.0 / 10.0]);
        assert!(Mask::empty(3, 3).tight_box().is_none());
    }

    #[test]
    fn sequence_requires_equal_extents() {
        assert!(MaskSequence::new(vec![Mask::empty(2, 2), Mask::empty(2, 3)]).is_err());
    }
}
