//! Dense row-major `Real` tensors and the handful of kernels the model needs.
//!
//! Every kernel computes each output row with a loop order that does not
//! depend on how many rows are processed together. Streaming (one frame at a
//! time) and offline (whole sequence) evaluation therefore produce
//! bit-identical values.

use std::fmt;

use crate::Real;
use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: Real) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// A 1-D tensor owning `data`.
    pub fn vector(data: Vec<Real>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<Real>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of the tensor viewed as a matrix (leading extent; 1 for scalars).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Row width of the tensor viewed as a matrix (product of trailing extents).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[Real] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [Real] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Real {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max)
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    /// `self · other` for `[m, k] · [k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if self.rank() != 2 || other.rank() != 2 || k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, other.shape),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Rows `start..start + len` as a new tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        let c = self.cols();
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(len);
        } else {
            shape[0] = len;
        }
        Tensor {
            shape,
            data: self.data[start * c..(start + len) * c].to_vec(),
        }
    }
}

/// `out += a · b` with `a: [m, k]`, `b: [k, n]`, all row-major.
pub(crate) fn gemm(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: [m, k]`, `b: [n, k]`.
pub(crate) fn gemm_bt(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out += aᵀ · b` with `a: [m, k]`, `b: [m, n]`; `out: [k, n]`.
pub(crate) fn gemm_at(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
pub(crate) fn dot(a: &[Real], b: &[Real]) -> Real {
    let mut acc = [0.0 as Real; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul_returns_input() {
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = Tensor::eye(2).matmul(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn row_results_do_not_depend_on_batch_size() {
        let a: Vec<Real> = (0..5 * 37).map(|i| ((i * 7919) % 113) as Real * 0.013 - 0.7).collect();
        let b: Vec<Real> = (0..37 * 11).map(|i| ((i * 104729) % 97) as Real * 0.021 - 1.0).collect();
        let a = Tensor::matrix(5, 37, a).unwrap();
        let b = Tensor::matrix(37, 11, b).unwrap();
        let full = a.matmul(&b).unwrap();
        for i in 0..5 {
            let single = a.slice_rows(i, 1).matmul(&b).unwrap();
            assert_eq!(single.data(), full.row(i));
        }
    }

    #[test]
    fn transposed_kernels_agree_with_explicit_transpose() {
        let a = Tensor::matrix(3, 4, (0..12).map(|v| v as Real * 0.5 - 2.0).collect()).unwrap();
        let b = Tensor::matrix(5, 4, (0..20).map(|v| (v as Real).sin()).collect()).unwrap();
        let mut out = vec![0.0; 15];
        gemm_bt(a.data(), b.data(), &mut out, 3, 4, 5);
        let expect = a.matmul(&b.transpose()).unwrap();
        for (x, y) in out.iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-5);
        }

        let c = Tensor::matrix(3, 5, (0..15).map(|v| (v as Real).cos()).collect()).unwrap();
        let mut out = vec![0.0; 20];
        gemm_at(a.data(), c.data(), &mut out, 3, 4, 5);
        let expect = a.transpose().matmul(&c).unwrap();
        for (x, y) in out.iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
