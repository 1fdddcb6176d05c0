//! Dense row-major tensors and the deterministic kernels the autodiff graph
//! is built from.
//!
//! Every reduction accumulates in ascending index order so that results are
//! reproducible bit for bit. There is no implicit broadcasting: operands of a
//! pointwise op must have identical extents.

use crate::error::{shape_err, Result};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp<T> {
    Add,
    Sub,
    Mul,
    Relu,
    Scale(T),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceMode {
    Sum,
    Mean,
    Max,
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(shape_err!("tensor rank must be at least 1"));
    }
    if let Some(pos) = dims.iter().position(|&d| d == 0) {
        return Err(shape_err!("extent {pos} of {dims:?} is zero"));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| shape_err!("element count of {dims:?} overflows"))
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n = check_dims(&dims)?;
        if n != data.len() {
            return Err(shape_err!("dims {dims:?} imply {n} elements but buffer holds {}", data.len()));
        }
        Ok(Tensor { dims, data })
    }

    pub fn full(dims: &[usize], value: T) -> Result<Self> {
        let n = check_dims(dims)?;
        Ok(Tensor { dims: dims.to_vec(), data: vec![value; n] })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::one())
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = check_dims(dims)?;
        Ok(Tensor { dims: dims.to_vec(), data: (0..n).map(&mut f).collect() })
    }

    pub fn scalar(value: T) -> Self {
        Tensor { dims: vec![1], data: vec![value] }
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Row-major matrix from nested rows.
    pub fn matrix(rows: &[&[T]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(shape_err!("ragged rows"));
        }
        Self::new(vec![r, c], rows.iter().flat_map(|row| row.iter().copied()).collect())
    }

    pub fn eye(n: usize) -> Result<Self> {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn shape2(&self) -> Result<(usize, usize)> {
        match self.dims[..] {
            [r, c] => Ok((r, c)),
            _ => Err(shape_err!("expected a matrix, got dims {:?}", self.dims)),
        }
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        let n = check_dims(dims)?;
        if n != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {dims:?}", self.dims));
        }
        Ok(Tensor { dims: dims.to_vec(), data: self.data.clone() })
    }

    pub fn into_reshaped(mut self, dims: &[usize]) -> Result<Self> {
        let n = check_dims(dims)?;
        if n != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {dims:?}", self.dims));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        index.iter().zip(&self.dims).fold(0, |acc, (&i, &d)| {
            debug_assert!(i < d);
            acc * d + i
        })
    }

    pub fn same_dims(&self, other: &Self, op: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(shape_err!("{op}: dims {:?} and {:?} differ", self.dims, other.dims));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, op: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_dims(other, op)?;
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_dims(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// In-place `self += s * other`.
    pub fn axpy(&mut self, s: T, other: &Self) -> Result<()> {
        self.same_dims(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.same_dims(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn norm2(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.same_dims(other, "max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).fold(T::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|&v| U::c(v.as_f64())).collect() }
    }

    /// Matrix transpose.
    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.shape2()?;
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Tensor::new(vec![c, r], out)
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[T] {
        let c = self.dims[self.dims.len() - 1];
        &self.data[i * c..(i + 1) * c]
    }

    /// Concatenate matrices with equal column counts along rows.
    pub fn vstack(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err!("vstack of nothing"))?;
        let (_, c) = first.shape2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, pc) = p.shape2()?;
            if pc != c {
                return Err(shape_err!("vstack: column counts {c} and {pc} differ"));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![rows, c], data)
    }

    /// Pointwise op over operands with identical dims.
    pub fn elementwise(op: ElementwiseOp<T>, inputs: &[&Self]) -> Result<Self> {
        let arity = match op {
            ElementwiseOp::Add | ElementwiseOp::Sub | ElementwiseOp::Mul => 2,
            ElementwiseOp::Relu | ElementwiseOp::Scale(_) => 1,
        };
        if inputs.len() != arity {
            return Err(shape_err!("{op:?} takes {arity} operands, got {}", inputs.len()));
        }
        match op {
            ElementwiseOp::Add => inputs[0].add(inputs[1]),
            ElementwiseOp::Sub => inputs[0].sub(inputs[1]),
            ElementwiseOp::Mul => inputs[0].mul(inputs[1]),
            ElementwiseOp::Relu => Ok(inputs[0].relu()),
            ElementwiseOp::Scale(s) => Ok(inputs[0].scale(s)),
        }
    }

    /// `op(A) · B` where `op` is the transpose when `transpose_first` is set.
    ///
    /// `A` is L×M and `B` is L×N when transposing, giving the M×N product
    /// `AᵀB`.
    pub fn matmul(a: &Self, b: &Self, transpose_first: bool) -> Result<Self> {
        matmul_ex(a, b, transpose_first, false)
    }

    /// Reduce over `axes`. Reduced extents are kept as 1 when `keep_dims`,
    /// removed otherwise (a full reduction without `keep_dims` yields `[1]`).
    pub fn reduce(&self, axes: &[usize], mode: ReduceMode, keep_dims: bool) -> Result<Self> {
        let rank = self.dims.len();
        let mut reduced = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(shape_err!("reduce axis {ax} out of range for rank {rank}"));
            }
            reduced[ax] = true;
        }
        let kept: Vec<usize> = self.dims.iter().zip(&reduced).map(|(&d, &r)| if r { 1 } else { d }).collect();
        let out_len: usize = kept.iter().product();
        let init = match mode {
            ReduceMode::Max => T::neg_infinity(),
            _ => T::zero(),
        };
        let mut out = vec![init; out_len];
        let mut index = vec![0usize; rank];
        for &v in &self.data {
            let o =
                index.iter().zip(&kept).zip(&reduced).fold(0, |acc, ((&i, &d), &r)| acc * d + if r { 0 } else { i });
            match mode {
                ReduceMode::Max => {
                    if v > out[o] {
                        out[o] = v;
                    }
                }
                _ => out[o] += v,
            }
            for ax in (0..rank).rev() {
                index[ax] += 1;
                if index[ax] < self.dims[ax] {
                    break;
                }
                index[ax] = 0;
            }
        }
        if mode == ReduceMode::Mean {
            let count: usize = self.data.len() / out_len;
            let inv = T::one() / T::c(count as f64);
            for v in &mut out {
                *v *= inv;
            }
        }
        let dims = if keep_dims {
            kept
        } else {
            let d: Vec<usize> = self.dims.iter().zip(&reduced).filter(|(_, &r)| !r).map(|(&d, _)| d).collect();
            if d.is_empty() {
                vec![1]
            } else {
                d
            }
        };
        Tensor::new(dims, out)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let (outer, n, inner) = self.split_axis(axis)?;
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let mut m = T::neg_infinity();
                for k in 0..n {
                    m = m.max(self.data[at(k)]);
                }
                let mut z = T::zero();
                for k in 0..n {
                    let e = (self.data[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..n {
                    out[at(k)] /= z;
                }
            }
        }
        Tensor::new(self.dims.clone(), out)
    }

    /// (outer, extent, inner) strides around `axis`.
    pub(crate) fn split_axis(&self, axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= self.dims.len() {
            return Err(shape_err!("axis {axis} out of range for dims {:?}", self.dims));
        }
        let outer = self.dims[..axis].iter().product();
        let inner = self.dims[axis + 1..].iter().product();
        Ok((outer, self.dims[axis], inner))
    }
}

/// General product `op(A) · op(B)` with optional transposes.
///
/// Each output element accumulates its inner products in ascending inner
/// index, the same order as the textbook triple loop.
pub fn matmul_ex<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, transpose_a: bool, transpose_b: bool) -> Result<Tensor<T>> {
    let (ar, ac) = a.shape2()?;
    let (br, bc) = b.shape2()?;
    let (m, ka) = if transpose_a { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if transpose_b { (bc, br) } else { (br, bc) };
    if ka != kb {
        return Err(shape_err!(
            "matmul: inner extents differ ({:?}{} x {:?}{})",
            a.dims(),
            if transpose_a { "ᵀ" } else { "" },
            b.dims(),
            if transpose_b { "ᵀ" } else { "" }
        ));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); m * n];
    match (transpose_a, transpose_b) {
        (false, false) => {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for k in 0..ka {
                    let aik = ad[i * ac + k];
                    let brow = &bd[k * bc..(k + 1) * bc];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += aik * bv;
                    }
                }
            }
        }
        (true, false) => {
            for k in 0..ka {
                let arow = &ad[k * ac..(k + 1) * ac];
                let brow = &bd[k * bc..(k + 1) * bc];
                for (i, &aki) in arow.iter().enumerate() {
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += aki * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &ad[i * ac..(i + 1) * ac];
                for j in 0..n {
                    let brow = &bd[j * bc..(j + 1) * bc];
                    let mut s = T::zero();
                    for (&x, &y) in arow.iter().zip(brow) {
                        s += x * y;
                    }
                    out[i * n + j] = s;
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = T::zero();
                    for k in 0..ka {
                        s += ad[k * ac + i] * bd[j * bc + k];
                    }
                    out[i * n + j] = s;
                }
            }
        }
    }
    Tensor::new(vec![m, n], out)
}
