//! Dense row-major tensors.
//!
//! A [`Tensor`] owns a flat buffer and an explicit shape. Every operation
//! that returns a tensor allocates fresh storage; nothing is a strided view.
//! Video activations use the axis order `N, C, U, T, H, W` (or `N, C, T, H, W`
//! once units are folded into the batch).

mod io;
mod scalar;

pub use io::{read_vt01, read_vt01_any, write_vt01, AnyTensor, DType};
pub use scalar::Scalar;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Row-major strides for `shape`.
pub fn strides_for(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    strides
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::shape(format!("zero extent in shape {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = check_shape(&shape).expect("tensor extents must be positive");
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Build a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(&[usize]) -> T) -> Self {
        let shape = shape.into();
        let n = check_shape(&shape).expect("tensor extents must be positive");
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for k in (0..shape.len()).rev() {
                idx[k] += 1;
                if idx[k] < shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_for(&self.shape)
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::shape(format!(
                "index rank {} does not match tensor rank {}",
                index.len(),
                self.shape.len()
            )));
        }
        let mut off = 0;
        for (k, (&i, &e)) in index.iter().zip(&self.shape).enumerate() {
            if i >= e {
                return Err(Error::shape(format!(
                    "index {i} out of range {e} on axis {k}"
                )));
            }
            off = off * e + i;
        }
        Ok(off)
    }

    /// Multi-index of a flat offset.
    pub fn unravel(&self, mut offset: usize) -> Vec<usize> {
        let mut idx = vec![0; self.shape.len()];
        for k in (0..self.shape.len()).rev() {
            idx[k] = offset % self.shape[k];
            offset /= self.shape[k];
        }
        idx
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: T) -> Result<()> {
        let off = self.offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape())?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_shape(other.shape())?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    /// Largest elementwise absolute difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_shape(other.shape())?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_shape(&self, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(format!(
                "expected shape {shape:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Swap axes `i` and `j`, materializing a contiguous copy.
    pub fn permute_axes(&self, i: usize, j: usize) -> Result<Self> {
        let rank = self.rank();
        if i >= rank || j >= rank {
            return Err(Error::invalid(format!(
                "axes ({i}, {j}) out of range for rank {rank}"
            )));
        }
        if i == j {
            return Err(Error::invalid(format!(
                "permute_axes needs two distinct axes, got {i} twice"
            )));
        }
        let (i, j) = (i.min(j), i.max(j));
        let mut out_shape = self.shape.clone();
        out_shape.swap(i, j);

        // Collapse into (outer, a, middle, b, inner) blocks and move a <-> b.
        let outer: usize = self.shape[..i].iter().product();
        let a = self.shape[i];
        let middle: usize = self.shape[i + 1..j].iter().product();
        let b = self.shape[j];
        let inner: usize = self.shape[j + 1..].iter().product();

        let mut data = Vec::with_capacity(self.data.len());
        for o in 0..outer {
            for jb in 0..b {
                for m in 0..middle {
                    for ia in 0..a {
                        let src = (((o * a + ia) * middle + m) * b + jb) * inner;
                        data.extend_from_slice(&self.data[src..src + inner]);
                    }
                }
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Fold the two leading axes into one: `(N, U, ...) -> (N*U, ...)`.
    pub fn merge_axis_into_batch(self) -> Result<Self> {
        if self.rank() < 2 {
            return Err(Error::shape(format!(
                "cannot merge leading axes of rank-{} tensor",
                self.rank()
            )));
        }
        let mut shape = Vec::with_capacity(self.rank() - 1);
        shape.push(self.shape[0] * self.shape[1]);
        shape.extend_from_slice(&self.shape[2..]);
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Inverse of [`merge_axis_into_batch`](Self::merge_axis_into_batch):
    /// `(N*U, ...) -> (N, U, ...)`.
    pub fn split_batch_axis(self, units: usize) -> Result<Self> {
        if self.rank() < 1 || units == 0 || !self.shape[0].is_multiple_of(units) {
            return Err(Error::shape(format!(
                "leading extent of {:?} is not divisible by {units}",
                self.shape
            )));
        }
        let mut shape = Vec::with_capacity(self.rank() + 1);
        shape.push(self.shape[0] / units);
        shape.push(units);
        shape.extend_from_slice(&self.shape[1..]);
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Zero-pad every axis symmetrically by `pads[k]`.
    pub fn zero_pad(&self, pads: &[usize]) -> Result<Self> {
        if pads.len() != self.rank() {
            return Err(Error::invalid(format!(
                "{} pad amounts for a rank-{} tensor",
                pads.len(),
                self.rank()
            )));
        }
        if pads.iter().all(|&p| p == 0) {
            return Ok(self.clone());
        }
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .zip(pads)
            .map(|(&e, &p)| e + 2 * p)
            .collect();
        let mut out = Tensor::zeros(out_shape.clone());
        let out_strides = strides_for(&out_shape);
        let rank = self.rank();
        let inner = self.shape[rank - 1];
        let rows = self.data.len() / inner;
        let mut idx = vec![0usize; rank - 1];
        for row in 0..rows {
            let mut dst = pads[rank - 1];
            for k in 0..rank - 1 {
                dst += (idx[k] + pads[k]) * out_strides[k];
            }
            out.data[dst..dst + inner].copy_from_slice(&self.data[row * inner..(row + 1) * inner]);
            for k in (0..rank - 1).rev() {
                idx[k] += 1;
                if idx[k] < self.shape[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Ok(out)
    }

    /// Copy of `len` consecutive positions along `axis`, starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let extent = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        if axis >= first.rank() {
            return Err(Error::invalid(format!("concat axis {axis} out of range")));
        }
        let mut shape = first.shape.clone();
        shape[axis] = 0;
        for p in parts {
            if p.rank() != first.rank()
                || p.shape
                    .iter()
                    .enumerate()
                    .any(|(k, &e)| k != axis && e != first.shape[k])
            {
                return Err(Error::shape(format!(
                    "concat along {axis}: {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
            shape[axis] += p.shape[axis];
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            p.expect_shape(first.shape())?;
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Sub-tensor at position `i` of the leading axis.
    pub fn index_outer(&self, i: usize) -> Result<Self> {
        if self.rank() < 2 || i >= self.shape[0] {
            return Err(Error::shape(format!(
                "outer index {i} out of range for {:?}",
                self.shape
            )));
        }
        let inner = self.data.len() / self.shape[0];
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        })
    }

    /// Slice of the flat buffer belonging to position `i` of the leading axis.
    pub fn outer_slice(&self, i: usize) -> &[T] {
        let inner = self.data.len() / self.shape[0];
        &self.data[i * inner..(i + 1) * inner]
    }

    pub fn outer_slice_mut(&mut self, i: usize) -> &mut [T] {
        let inner = self.data.len() / self.shape[0];
        &mut self.data[i * inner..(i + 1) * inner]
    }
}
