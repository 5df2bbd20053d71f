//! Dense row-major `f64` tensors and the pure kernels the tape is built on.

use crate::error::{Error, Result};

/// Dense real-valued tensor in row-major order.
///
/// Every constructor checks that the shape matches the buffer length and
/// that all values are finite, so a `Tensor` never carries NaN or Inf.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim(format!("shape {shape:?} must be non-empty and positive")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor from a computed buffer the caller already knows is
    /// consistent with `shape`; only finiteness is checked.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        check_finite(&data)?;
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![1], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dim("ragged rows"));
        }
        Tensor::matrix(r, c, rows.concat())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!("expected a scalar, got shape {:?}", self.shape)))
        }
    }

    /// Rows under the matrix view; a vector `[n]` is a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() || shape.contains(&0) {
            return Err(Error::dim(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.matrix_dims()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::dim(format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    /// Accumulate `other` into `self`; shapes must agree in length.
    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::numeric(format!("non-finite value {} at index {i}", data[i]))),
        None => Ok(()),
    }
}

/// Elementwise operation selector for [`elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Sigmoid,
    Tanh,
    Relu,
    Add,
    Mul,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Applies a unary (`sigmoid`, `tanh`, `relu`) or binary (`add`, `mul`)
/// elementwise op. Binary operands must match exactly or one must be a scalar.
pub fn elementwise(kind: Elementwise, operands: &[&Tensor]) -> Result<Tensor> {
    match kind {
        Elementwise::Sigmoid | Elementwise::Tanh | Elementwise::Relu => {
            let [x] = operands else {
                return Err(Error::dim(format!("{kind:?} takes one operand")));
            };
            let f: fn(f64) -> f64 = match kind {
                Elementwise::Sigmoid => sigmoid,
                Elementwise::Tanh => f64::tanh,
                _ => |v: f64| v.max(0.0),
            };
            Tensor::from_parts(x.shape.clone(), x.data.iter().map(|&v| f(v)).collect())
        }
        Elementwise::Add | Elementwise::Mul => {
            let [a, b] = operands else {
                return Err(Error::dim(format!("{kind:?} takes two operands")));
            };
            let f: fn(f64, f64) -> f64 = if kind == Elementwise::Add {
                |x, y| x + y
            } else {
                |x, y| x * y
            };
            broadcast_binary(a, b, f)
        }
    }
}

pub(crate) fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(a.shape.clone(), data)
    } else if b.is_scalar() {
        let y = b.data[0];
        Tensor::from_parts(a.shape.clone(), a.data.iter().map(|&x| f(x, y)).collect())
    } else if a.is_scalar() {
        let x = a.data[0];
        Tensor::from_parts(b.shape.clone(), b.data.iter().map(|&y| f(x, y)).collect())
    } else {
        Err(Error::dim(format!(
            "shapes {:?} and {:?} are not broadcast-compatible",
            a.shape, b.shape
        )))
    }
}

/// Matrix product. Vectors are treated as single rows.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims()?;
    let (k2, n) = b.matrix_dims()?;
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm_nn(&a.data, &b.data, &mut out, m, k, n);
    Tensor::from_parts(vec![m, n], out)
}

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×k] += g[m×n] · b[k×n]ᵀ
pub(crate) fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · g[m×n]
pub(crate) fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Softmax of a vector, stabilised by subtracting the maximum.
/// A matrix is normalised row by row.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    let (r, c) = v.matrix_dims()?;
    let mut out = v.data.clone();
    for i in 0..r {
        softmax_in_place(&mut out[i * c..(i + 1) * c]);
    }
    Tensor::from_parts(v.shape.clone(), out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Mean squared error `(1/n) Σ (pred - target)²`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dim(format!(
            "mse operands have {} and {} elements",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    Ok(pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}
