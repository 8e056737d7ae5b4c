use std::fmt;

use crate::error::{Error, Result};

/// A learned parameter array of arbitrary rank (conv kernels are
/// `(co, ci, k, k)`, depthwise kernels `(c, 1, k, k)`, fc weights
/// `(out, in)`, biases `(c)`).
#[derive(Clone, PartialEq)]
pub struct Param {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Param {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "buffer of length {} does not fit dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Param { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let numel = dims.iter().product();
        Param {
            dims,
            data: vec![0.0; numel],
        }
    }

    pub fn full(dims: Vec<usize>, value: f32) -> Self {
        let numel = dims.iter().product();
        Param {
            dims,
            data: vec![value; numel],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn bit_eq(&self, other: &Param) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Debug for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Param").field("dims", &self.dims).finish()
    }
}
