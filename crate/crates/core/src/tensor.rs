//! Dense row-major N-dimensional tensors.
//!
//! A [`Tensor`] always owns a contiguous buffer whose order matches the
//! logical index order. Operations that reorder axes ([`Tensor::permute`])
//! materialize a fresh buffer, so there are no strided views to track.
//!
//! Binary operations broadcast between operands of equal rank where one side
//! has extent 1 on an axis the other does not.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{gemm_acc, Strided};

/// Floating-point element type. Implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// `tanh`, allowed to trade the last few ulps for speed.
    fn tanh_fast(self) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn tanh_fast(self) -> Self {
        tanh_rational(self)
    }
}

/// Odd 13/6 rational fit of `tanh` on `[-7.9, 7.9]`, saturating outside.
/// Branch-free so it vectorizes; within a few ulps of `f32::tanh`.
#[inline]
fn tanh_rational(x: f32) -> f32 {
    const CLAMP: f32 = 7.905_311;
    const A: [f32; 7] =
        [4.893_524_6e-3, 6.372_619_3e-4, 1.485_722_4e-5, 5.122_297e-8, -8.604_672e-11, 2.000_188e-13, -2.760_768_5e-16];
    const B: [f32; 4] = [4.893_525e-3, 2.268_434_6e-3, 1.185_347e-4, 1.198_258_4e-6];
    let x = x.clamp(-CLAMP, CLAMP);
    let x2 = x * x;
    let p = ((((((A[6] * x2 + A[5]) * x2 + A[4]) * x2 + A[3]) * x2 + A[2]) * x2 + A[1]) * x2 + A[0]) * x;
    let q = ((B[3] * x2 + B[2]) * x2 + B[1]) * x2 + B[0];
    p / q
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn tanh_fast(self) -> Self {
        self.tanh()
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.shape).field("data", &self.data).finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return shape_err("rank must be at least 1");
    }
    if shape.contains(&0) {
        return shape_err(format!("zero extent in shape {shape:?}"));
    }
    Ok(shape.iter().product())
}

/// Row-major strides for `shape`.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Visits every multi-index of `shape` in row-major order, handing `f` the
/// offset of that index under each of the `N` stride vectors.
pub(crate) fn strided_walk<const N: usize>(shape: &[usize], strides: [&[usize]; N], mut f: impl FnMut([usize; N])) {
    let rank = shape.len();
    let last = rank - 1;
    let n_last = shape[last];
    let step: [usize; N] = std::array::from_fn(|k| strides[k][last]);
    let mut idx = vec![0usize; rank];
    let mut base = [0usize; N];
    loop {
        let mut off = base;
        for _ in 0..n_last {
            f(off);
            for k in 0..N {
                off[k] += step[k];
            }
        }
        let mut ax = last;
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            for k in 0..N {
                base[k] += strides[k][ax];
            }
            if idx[ax] < shape[ax] {
                break;
            }
            for k in 0..N {
                base[k] -= strides[k][ax] * shape[ax];
            }
            idx[ax] = 0;
        }
    }
}

/// Strides of `shape` viewed inside `out` with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides_of(shape);
    shape.iter().zip(out).zip(s).map(|((&e, &o), st)| if e == o { st } else { 0 }).collect()
}

/// Result shape of broadcasting `a` against `b`.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return shape_err(format!("rank mismatch: {a:?} vs {b:?}"));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => shape_err(format!("cannot broadcast {a:?} with {b:?}")),
        })
        .collect()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return shape_err(format!("shape {shape:?} needs {n} elements, got {}", data.len()));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self { shape: shape.to_vec(), data: vec![value; n] })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self { shape: other.shape.clone(), data: vec![T::zero(); other.data.len()] }
    }

    /// Rank-1 tensor holding a single value.
    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() })
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

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
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

    /// The single element of a tensor whose extents are all 1.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return shape_err(format!("item() on shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    /// Buffer already matches logical order; returns a copy for API parity
    /// with strided tensor libraries.
    pub fn contiguous(&self) -> Self {
        self.clone()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: T) -> Self {
        self.map(|v| v + s)
    }

    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reorders axes: `out.shape[i] == self.shape[axes[i]]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Config(format!("{axes:?} is not a permutation of 0..{rank}")));
        }
        let src = self.strides();
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let perm_strides: Vec<usize> = axes.iter().map(|&a| src[a]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        strided_walk(&shape, [&perm_strides], |[s]| data.push(self.data[s]));
        Ok(Self { shape, data })
    }

    /// Applies `weight · row + bias` to every last-axis row.
    pub fn linear_last_axis(&self, weight: &Self, bias: &Self) -> Result<Self> {
        self.linear_along(weight, bias, self.rank().saturating_sub(1))
    }

    /// Applies `weight · v + bias` to every fibre `v` along `axis`, which
    /// changes extent from `n_in` to `n_out`.
    ///
    /// `weight` is `n_out × n_in`, `bias` has `n_out` entries. Each output
    /// accumulates its products in increasing input index order, starting
    /// from zero, then adds the bias.
    pub fn linear_along(&self, weight: &Self, bias: &Self, axis: usize) -> Result<Self> {
        let (n_out, n_in) = match weight.shape() {
            &[o, i] => (o, i),
            s => return shape_err(format!("weight must be a matrix, got {s:?}")),
        };
        if bias.shape() != [n_out] {
            return shape_err(format!("bias shape {:?} does not match n_out={n_out}", bias.shape()));
        }
        if self.shape.get(axis) != Some(&n_in) {
            return shape_err(format!("axis {axis} of {:?} does not match n_in={n_in}", self.shape));
        }
        let (outer, inner) = split_at_axis(&self.shape, axis);
        let mut out = vec![T::zero(); outer * n_out * inner];
        if inner == 1 {
            let wt = transpose2(&weight.data, n_out, n_in);
            gemm_acc(Strided::rows(&self.data, n_in), Strided::rows(&wt, n_out), &mut out, outer, n_in, n_out);
            for acc in out.chunks_exact_mut(n_out) {
                for (a, &b) in acc.iter_mut().zip(&bias.data) {
                    *a += b;
                }
            }
        } else {
            let w = Strided::rows(&weight.data, n_in);
            for (xs, os) in self.data.chunks_exact(n_in * inner).zip(out.chunks_exact_mut(n_out * inner)) {
                gemm_acc(w, Strided::rows(xs, inner), os, n_out, n_in, inner);
                for (row, &b) in os.chunks_exact_mut(inner).zip(&bias.data) {
                    for a in row {
                        *a += b;
                    }
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = n_out;
        Ok(Self { shape, data: out })
    }

    /// Arithmetic mean over `axes`; reduced axes are removed. Reducing every
    /// axis yields shape `[1]`.
    pub fn mean_over_axes(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        if axes.is_empty() {
            return shape_err("mean over an empty axis set");
        }
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return shape_err(format!("axis {a} out of range for rank {rank}"));
            }
            reduced[a] = true;
        }
        let kept: Vec<usize> = (0..rank).filter(|&i| !reduced[i]).collect();
        let out_shape: Vec<usize> =
            if kept.is_empty() { vec![1] } else { kept.iter().map(|&i| self.shape[i]).collect() };
        let keep_shape: Vec<usize> = (0..rank).map(|i| if reduced[i] { 1 } else { self.shape[i] }).collect();
        let out_strides = broadcast_strides(&keep_shape, &self.shape);
        let count: usize = (0..rank).filter(|&i| reduced[i]).map(|i| self.shape[i]).product();
        let mut acc = vec![T::zero(); out_shape.iter().product()];
        let mut i = 0;
        strided_walk(&self.shape, [&out_strides], |[o]| {
            acc[o] += self.data[i];
            i += 1;
        });
        let n = T::of(count as f64);
        for a in &mut acc {
            *a /= n;
        }
        Self::new(&out_shape, acc)
    }

    /// Sums broadcast axes away so the result has `shape`; inverse of the
    /// broadcast performed by binary ops.
    pub fn sum_to_shape(&self, shape: &[usize]) -> Result<Self> {
        if shape == self.shape.as_slice() {
            return Ok(self.clone());
        }
        if broadcast_shape(shape, &self.shape)? != self.shape {
            return shape_err(format!("cannot reduce {:?} to {shape:?}", self.shape));
        }
        let strides = broadcast_strides(shape, &self.shape);
        let mut acc = vec![T::zero(); shape.iter().product()];
        let mut i = 0;
        strided_walk(&self.shape, [&strides], |[o]| {
            acc[o] += self.data[i];
            i += 1;
        });
        Self::new(shape, acc)
    }

    fn zip_broadcast(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Self { shape: self.shape.clone(), data });
        }
        let shape = broadcast_shape(&self.shape, &other.shape)?;
        let sa = broadcast_strides(&self.shape, &shape);
        let sb = broadcast_strides(&other.shape, &shape);
        let mut data = Vec::with_capacity(shape.iter().product());
        strided_walk(&shape, [&sa, &sb], |[i, j]| data.push(f(self.data[i], other.data[j])));
        Ok(Self { shape, data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_broadcast(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_broadcast(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_broadcast(other, |a, b| a * b)
    }

    /// In-place `self += other` for identical shapes.
    pub fn accumulate(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("accumulate {:?} into {:?}", other.shape, self.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

fn transpose2<T: Scalar>(m: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = m[r * cols + c];
        }
    }
    out
}

/// Sizes of the axes before and after `axis`, flattened.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

/// Gradient of [`Tensor::linear_along`] with respect to its input.
pub fn linear_input_grad<T: Scalar>(grad_out: &Tensor<T>, weight: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (n_out, n_in) = (weight.shape[0], weight.shape[1]);
    let (outer, inner) = split_at_axis(&grad_out.shape, axis);
    let mut dx = vec![T::zero(); outer * n_in * inner];
    if inner == 1 {
        gemm_acc(Strided::rows(&grad_out.data, n_out), Strided::rows(&weight.data, n_in), &mut dx, outer, n_out, n_in);
    } else {
        let wt = Strided::transposed(&weight.data, n_in);
        for (gs, ds) in grad_out.data.chunks_exact(n_out * inner).zip(dx.chunks_exact_mut(n_in * inner)) {
            gemm_acc(wt, Strided::rows(gs, inner), ds, n_in, n_out, inner);
        }
    }
    let mut shape = grad_out.shape.clone();
    shape[axis] = n_in;
    Tensor { shape, data: dx }
}

/// Gradients of [`Tensor::linear_along`] with respect to weight and bias.
pub fn linear_param_grads<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    n_out: usize,
    n_in: usize,
    axis: usize,
) -> (Tensor<T>, Tensor<T>) {
    let (outer, inner) = split_at_axis(&grad_out.shape, axis);
    let mut dw = vec![T::zero(); n_out * n_in];
    let mut db = vec![T::zero(); n_out];
    if inner == 1 {
        gemm_acc(
            Strided::transposed(&grad_out.data, n_out),
            Strided::rows(&input.data, n_in),
            &mut dw,
            n_out,
            outer,
            n_in,
        );
        for g in grad_out.data.chunks_exact(n_out) {
            for (a, &gv) in db.iter_mut().zip(g) {
                *a += gv;
            }
        }
    } else {
        for (gs, xs) in grad_out.data.chunks_exact(n_out * inner).zip(input.data.chunks_exact(n_in * inner)) {
            gemm_acc(Strided::rows(gs, inner), Strided::transposed(xs, inner), &mut dw, n_out, inner, n_in);
            for (a, row) in db.iter_mut().zip(gs.chunks_exact(inner)) {
                for &gv in row {
                    *a += gv;
                }
            }
        }
    }
    (Tensor { shape: vec![n_out, n_in], data: dw }, Tensor { shape: vec![n_out], data: db })
}

/// Inverse of a permutation.
pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}
