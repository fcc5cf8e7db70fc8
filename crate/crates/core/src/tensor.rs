//! Dense row-major `f64` arrays and the index arithmetic used by the TT layers.
//!
//! Indexing is zero-based everywhere. The last index varies fastest.

use std::fmt;

use crate::error::{Error, Result};

/// Extents of a dense array. Every extent is at least one and the total size
/// fits in `usize`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: Vec<usize>,
    size: usize,
}

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() {
            return Err(Error::Shape("shape must have at least one dimension".into()));
        }
        let mut size = 1usize;
        for (axis, &extent) in dims.iter().enumerate() {
            if extent == 0 {
                return Err(Error::Shape(format!("extent of axis {axis} is zero in {dims:?}")));
            }
            size = size
                .checked_mul(extent)
                .ok_or_else(|| Error::Shape(format!("total size of {dims:?} overflows")))?;
        }
        Ok(Self { dims, size })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn size(&self) -> usize {
        self.size
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.dims)
    }
}

/// Row-major linearization of a multi-index.
pub fn multi_to_flat(indices: &[usize], shape: &Shape) -> Result<usize> {
    if indices.len() != shape.rank() {
        return Err(Error::Index(format!(
            "index {indices:?} has rank {}, shape {shape:?} has rank {}",
            indices.len(),
            shape.rank()
        )));
    }
    let mut flat = 0usize;
    for (axis, (&i, &extent)) in indices.iter().zip(shape.dims()).enumerate() {
        if i >= extent {
            return Err(Error::Index(format!(
                "index {i} out of bounds for axis {axis} with extent {extent}"
            )));
        }
        flat = flat * extent + i;
    }
    Ok(flat)
}

/// Inverse of [`multi_to_flat`].
pub fn flat_to_multi(flat: usize, shape: &Shape) -> Result<Vec<usize>> {
    if flat >= shape.size() {
        return Err(Error::Index(format!(
            "flat index {flat} out of bounds for shape {shape:?} of size {}",
            shape.size()
        )));
    }
    let mut out = vec![0; shape.rank()];
    let mut rest = flat;
    for (slot, &extent) in out.iter_mut().zip(shape.dims()).rev() {
        *slot = rest % extent;
        rest /= extent;
    }
    Ok(out)
}

/// Splits a combined index `l = i * n + j` into its row part `i` and column
/// part `j`, with `0 <= j < n`.
pub fn split_index(l: usize, n: usize) -> Result<(usize, usize)> {
    if n == 0 {
        return Err(Error::Argument("cannot split an index by a zero factor".into()));
    }
    Ok((l / n, l % n))
}

/// Dense tensor of `f64` values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn zeros(shape: Shape) -> Self {
        let data = vec![0.0; shape.size()];
        Self { shape, data }
    }

    /// Builds a tensor from a flat buffer. Rejects length mismatches and
    /// non-finite values.
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.size() {
            return Err(Error::Shape(format!(
                "buffer of length {} does not fit shape {shape:?} of size {}",
                data.len(),
                shape.size()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerics(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for training math, where non-finite values may
    /// appear transiently. Panics on a length mismatch.
    pub(crate) fn from_raw(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), shape.size(), "buffer does not fit {shape:?}");
        Self { shape, data }
    }

    pub(crate) fn raw_matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::from_raw(Shape::new([rows, cols]).expect("non-zero matrix extents"), data)
    }

    /// Convenience constructor for a 2-D tensor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec(Shape::new([rows, cols])?, data)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
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

    pub fn get(&self, indices: &[usize]) -> Result<f64> {
        Ok(self.data[multi_to_flat(indices, &self.shape)?])
    }

    /// Row `r` of a tensor viewed as (dims[0], rest).
    pub fn row(&self, r: usize) -> &[f64] {
        let width = self.data.len() / self.shape.dims()[0];
        &self.data[r * width..(r + 1) * width]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let width = self.data.len() / self.shape.dims()[0];
        &mut self.data[r * width..(r + 1) * width]
    }
}

/// Replaces the shape metadata, keeping the flat buffer untouched.
pub fn reshape(t: &DenseTensor, new_shape: Shape) -> Result<DenseTensor> {
    t.clone().into_reshaped(new_shape)
}

impl DenseTensor {
    pub fn into_reshaped(self, new_shape: Shape) -> Result<DenseTensor> {
        if new_shape.size() != self.shape.size() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} (size {}) into {new_shape:?} (size {})",
                self.shape,
                self.shape.size(),
                new_shape.size()
            )));
        }
        Ok(DenseTensor {
            shape: new_shape,
            data: self.data,
        })
    }
}
