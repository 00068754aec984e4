//! Dense row-major f64 tensors.
//!
//! This is deliberately small: just enough shape bookkeeping and linear
//! algebra for the layer vocabulary in [`crate::blocks`]. Everything is
//! owned, finite-checked at the boundaries, and free of interior mutability.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("zero-sized axis in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Number of rows when the last axis is treated as the feature axis.
    pub fn rows(&self) -> usize {
        self.len() / self.shape.last().copied().unwrap_or(1)
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "add: shape {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    /// a*x + self, in place.
    pub fn axpy(&mut self, a: f64, x: &Tensor) -> Result<()> {
        if self.shape != x.shape {
            return Err(Error::Dimension(format!(
                "axpy: shape {:?} vs {:?}",
                self.shape, x.shape
            )));
        }
        for (d, &v) in self.data.iter_mut().zip(&x.data) {
            *d += a * v;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `out[i][j] = sum_k a[i][k] * b[k][j]` over the trailing two logical axes.
///
/// `a` is (m × k) and `b` is (k × n) given as flat row-major slices.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[i][j] = sum_k a[k][i] * b[k][j]`; `a` is (k × m), `b` is (k × n).
pub fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[i][j] = sum_k a[i][k] * b[j][k]`; `a` is (m × k), `b` is (n × k).
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// Numerically stable softmax along `axis`.
///
/// Uses max-subtraction so large logits do not overflow.
pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = input.shape();
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; input.len()];
    let data = input.data();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| o * axis_len * inner + j * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..axis_len {
                max = max.max(data[idx(j)]);
            }
            let mut sum = 0.0;
            for j in 0..axis_len {
                let e = (data[idx(j)] - max).exp();
                out[idx(j)] = e;
                sum += e;
            }
            for j in 0..axis_len {
                out[idx(j)] /= sum;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}
