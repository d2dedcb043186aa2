use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Dense n-dimensional array of f64 in row-major order.
///
/// Layout conventions used across the crate:
/// * feature maps: `[channels, height, width]`
/// * heat-map stacks: `[time, channels, height, width]`
/// * 2-D conv weights: `[out_c, in_c, kh, kw]`
/// * 3-D conv weights: `[out_c, in_c, kt, kh, kw]`
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

pub const MAX_RANK: usize = 5;

impl Tensor {
    /// Builds a tensor from explicit dims and data; data length must equal
    /// the product of the dims and every extent must be at least 1.
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::shape(
                "tensor",
                format!("rank {} outside 1..={}", dims.len(), MAX_RANK),
            ));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {dims:?}")));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {:?} imply {} values, got {}", dims, len, data.len()),
            ));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let len: usize = dims.iter().product();
        Tensor::new(dims, vec![0.0; len])
    }

    pub fn filled(dims: &[usize], value: f64) -> Result<Self> {
        let len: usize = dims.iter().product();
        Tensor::new(dims, vec![value; len])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Checks that another tensor has identical dims.
    pub fn same_dims(&self, other: &Tensor, context: &'static str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(
                context,
                format!("expected {:?}, got {:?}", self.dims, other.dims),
            ));
        }
        Ok(())
    }

    /// Channel plane of a `[C, H, W]` tensor as a slice.
    pub fn plane(&self, c: usize) -> &[f64] {
        let (h, w) = (self.dims[self.rank() - 2], self.dims[self.rank() - 1]);
        &self.data[c * h * w..(c + 1) * h * w]
    }
}
