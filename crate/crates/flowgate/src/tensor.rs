//! Dense tensor values.
//!
//! A [`Tensor`] is a shape plus a flat row-major `f64` buffer. All
//! numerics in this crate run in `f64`: at desk scale the cost is
//! irrelevant and it keeps finite-difference gradient checks sharp.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// A tensor filled with zeros.
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// A tensor filled with a constant.
    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Wraps an existing buffer. The element count must match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("{expected} elements for shape {shape:?}"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// A scalar (shape `[1]`) tensor.
    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform init on `[-a, a]` with `a = sqrt(1 / fan_in)`.
    ///
    /// `fan_in` must be positive; for a convolution kernel it is
    /// `in_channels * k * k`.
    pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if fan_in == 0 {
            return Err(Error::contract("init_uniform: fan_in must be positive"));
        }
        let a = (1.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-a..=a)).collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape(
                "Tensor::item",
                "1 element",
                format!("{} elements", self.data.len()),
            ));
        }
        Ok(self.data[0])
    }

    /// True when every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat offset of an `[n, c, y, x]` index into a rank-4 tensor.
    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let (cs, hs, ws) = (self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * cs + c) * hs + y) * ws + x]
    }
}

/// Pretty-prints a shape for diagnostics.
pub fn shape_str(shape: &[usize]) -> String {
    format!("{shape:?}")
}
