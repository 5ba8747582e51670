//! Dense row-major tensors.
//!
//! The kernel works on flat `f64` buffers; two-dimensional views borrow the
//! underlying storage for matrix products.

use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};

/// A dense tensor: a shape and a flat row-major value buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking that the buffer length matches the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, buffer has {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar_filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension, conventionally the batch size.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of elements per leading-dimension row.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elems) to {:?} ({} elems)",
                self.shape,
                self.data.len(),
                shape,
                expect
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// View as a `rows x cols` matrix; the product must equal the element count.
    pub fn view_2d(&self, rows: usize, cols: usize) -> Result<ArrayView2<'_, f64>> {
        ArrayView2::from_shape((rows, cols), &self.data)
            .map_err(|e| Error::Shape(format!("2-d view {rows}x{cols}: {e}")))
    }

    pub fn view_2d_mut(&mut self, rows: usize, cols: usize) -> Result<ArrayViewMut2<'_, f64>> {
        ArrayViewMut2::from_shape((rows, cols), &mut self.data)
            .map_err(|e| Error::Shape(format!("2-d view {rows}x{cols}: {e}")))
    }
}
