//! Dense row-major tensors and the numeric kernels the tape is built on.
//!
//! Tensors are generic over [`Real`] so that the same graph can be replayed in
//! 64-bit precision for gradient checking. Training runs use `f32`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Floating point element type usable by the engine.
pub trait Real:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    /// Size of one element in bytes, used for cache accounting.
    const BYTES: usize;

    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("representable literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    fn as_f32(self) -> f32 {
        self.to_f32().expect("finite conversion")
    }

    fn of_f32(x: f32) -> Self;
}

impl Real for f32 {
    const BYTES: usize = 4;

    fn of_f32(x: f32) -> Self {
        x
    }
}

impl Real for f64 {
    const BYTES: usize = 8;

    fn of_f32(x: f32) -> Self {
        x as f64
    }
}

/// Dense n-dimensional array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    /// Builds a tensor, checking that every dimension is positive and that
    /// `data` matches the shape. An empty shape denotes a scalar.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        if numel_of(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel_of(&shape);
        Self::new(shape, vec![value; n]).expect("full: positive dims")
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    /// Convenience constructor from `f64` literals.
    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut Vec<T>> {
        self.grad.as_mut()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient length {} does not match shape {:?}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.data.len());
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel_of(&shape) != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Self::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            grad: None,
        }
    }

    /// Converts element precision, dropping any gradient.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
            grad: None,
        }
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|x| x.as_f32()).collect()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

const PAR_THRESHOLD: usize = 1 << 15;

/// `out[m,n] = a[m,k] * b[k,n]`; each output row is computed by a single task
/// in a fixed summation order, so results do not depend on thread count.
pub(crate) fn gemm<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |(i, out_row): (usize, &mut [T])| {
        out_row.iter_mut().for_each(|x| *x = T::zero());
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bpj) in out_row.iter_mut().zip(b_row) {
                *o += aip * bpj;
            }
        }
    };
    if m > 1 && m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// Transposes a row-major `[rows, cols]` matrix.
pub(crate) fn transpose2<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Numpy-style broadcast of two batch shapes.
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Maps a flat index in `full` batch space to the flat index in the
/// (right-aligned, possibly broadcast) `part` batch space.
pub(crate) fn broadcast_index(mut flat: usize, full: &[usize], part: &[usize]) -> usize {
    let offset = full.len() - part.len();
    let mut idx = 0;
    let mut stride = 1;
    for axis in (0..full.len()).rev() {
        let coord = flat % full[axis];
        flat /= full[axis];
        if axis >= offset {
            let d = part[axis - offset];
            if d != 1 {
                idx += coord * stride;
            }
            stride *= d;
        }
    }
    idx
}

/// Sums a tensor laid out in `full` shape down to a broadcast-compatible
/// `target` shape (right-aligned). Iterates in a fixed order.
pub(crate) fn reduce_to_shape<T: Real>(x: &[T], full: &[usize], target: &[usize]) -> Vec<T> {
    if full == target {
        return x.to_vec();
    }
    let mut out = vec![T::zero(); numel_of(target)];
    for (flat, &v) in x.iter().enumerate() {
        out[broadcast_index(flat, full, target)] += v;
    }
    out
}

/// Batched matrix product with broadcast leading dimensions. Optional
/// transposition applies to the trailing two axes of each operand.
pub(crate) fn batched_matmul<T: Real>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    trans_a: bool,
    trans_b: bool,
) -> Result<(Vec<T>, Vec<usize>)> {
    let mismatch = || {
        Error::Shape(format!(
            "matmul dimension mismatch: {a_shape:?} x {b_shape:?}"
        ))
    };
    if a_shape.len() < 2 || b_shape.len() < 2 {
        return Err(mismatch());
    }
    let (ar, ac) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
    let (br, bc) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(mismatch());
    }
    let a_batch = &a_shape[..a_shape.len() - 2];
    let b_batch = &b_shape[..b_shape.len() - 2];
    let batch = broadcast_shapes(a_batch, b_batch).ok_or_else(mismatch)?;
    let batch_count = numel_of(&batch);
    let (a_mat, b_mat) = (ar * ac, br * bc);

    let mut out = vec![T::zero(); batch_count * m * n];
    let one = |(bi, out_mat): (usize, &mut [T])| {
        let ai = broadcast_index(bi, &batch, a_batch);
        let bj = broadcast_index(bi, &batch, b_batch);
        let a_slice = &a[ai * a_mat..(ai + 1) * a_mat];
        let b_slice = &b[bj * b_mat..(bj + 1) * b_mat];
        let a_t;
        let a_use = if trans_a {
            a_t = transpose2(a_slice, ar, ac);
            &a_t[..]
        } else {
            a_slice
        };
        let b_t;
        let b_use = if trans_b {
            b_t = transpose2(b_slice, br, bc);
            &b_t[..]
        } else {
            b_slice
        };
        gemm(a_use, b_use, out_mat, m, k, n);
    };
    if batch_count > 1 && batch_count * m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(m * n).enumerate().for_each(one);
    } else {
        out.chunks_mut(m * n).enumerate().for_each(one);
    }
    let mut shape = batch;
    shape.extend([m, n]);
    Ok((out, shape))
}

/// Permutes axes of a row-major array.
pub(crate) fn permute<T: Real>(x: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = Vec::with_capacity(x.len());
    let mut coord = vec![0usize; rank];
    for _ in 0..x.len() {
        let src: usize = (0..rank).map(|i| coord[i] * in_strides[axes[i]]).sum();
        out.push(x[src]);
        for i in (0..rank).rev() {
            coord[i] += 1;
            if coord[i] < out_shape[i] {
                break;
            }
            coord[i] = 0;
        }
    }
    (out, out_shape)
}

/// Splits a shape around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel_of(&shape[..axis]);
    let inner = numel_of(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}
