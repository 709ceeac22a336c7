//! Binary mask container shared by the generator, perturbation, and metrics.

use crate::diffcore::Tensor;
use crate::error::{CrmError, Result};

/// Dense binary mask stored row-major as 0/1 bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), h * w);
        debug_assert!(data.iter().all(|&v| v <= 1));
        BinaryMask { h, w, data }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.count_ones() as f64 / self.len() as f64
    }

    /// Soft-mask tensor of shape 1 x h x w with values {0.0, 1.0}.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(
            vec![1, self.h, self.w],
            self.data.iter().map(|&v| v as f32).collect(),
        )
    }

    /// Threshold a 1 x H x W soft mask at `thresh` (pixel >= thresh -> 1).
    pub fn from_tensor(soft: &Tensor<f32>, thresh: f32) -> Result<Self> {
        let s = soft.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(CrmError::shape(format!(
                "BinaryMask::from_tensor: expected 1 x H x W, got {s:?}"
            )));
        }
        Ok(BinaryMask {
            h: s[1],
            w: s[2],
            data: soft
                .data()
                .iter()
                .map(|&v| if v >= thresh { 1 } else { 0 })
                .collect(),
        })
    }

    /// Crop a `size` x `size` window with top-left corner (y0, x0).
    pub fn crop(&self, y0: usize, x0: usize, size: usize) -> Self {
        assert!(y0 + size <= self.h && x0 + size <= self.w);
        let mut data = Vec::with_capacity(size * size);
        for y in y0..y0 + size {
            data.extend_from_slice(&self.data[y * self.w + x0..y * self.w + x0 + size]);
        }
        BinaryMask {
            h: size,
            w: size,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip() {
        let m = BinaryMask::new(2, 3, vec![1, 0, 1, 0, 1, 0]);
        let t = m.to_tensor();
        assert_eq!(t.shape(), vec![1, 2, 3]);
        let back = BinaryMask::from_tensor(&t, 0.5).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn crop_window() {
        let m = BinaryMask::new(3, 3, vec![0, 1, 0, 1, 1, 0, 0, 0, 1]);
        let c = m.crop(1, 1, 2);
        assert_eq!(c.data, vec![1, 0, 0, 1]);
    }
}
