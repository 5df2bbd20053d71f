//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Each call on [`Tape`] evaluates one primitive eagerly and appends a node.
//! [`Tape::backward`] walks the nodes once in reverse, pushing adjoints to
//! operands and finally into the [`ParamStore`] gradient buffers.

use super::tensor::{broadcast_binary, gemm_nt, gemm_tn, sigmoid};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows(Var),
    ScaleRows(Var, Var),
    RowSum(Var),
    Sum(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of evaluated primitives.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).matrix_dims()
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const)
    }

    /// Leaf bound to a trainable parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_binary(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect())?;
        Ok(self.push(out, Op::Scale(a, c)))
    }

    /// `a[m×n] + bias[n]`, the bias repeated on every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let b = self.value(bias);
        if b.len() != n {
            return Err(Error::dim(format!("bias of {} values for {n} columns", b.len())));
        }
        let x = self.value(a);
        let mut out = x.data().to_vec();
        for r in 0..m {
            for (o, bv) in out[r * n..(r + 1) * n].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out)?;
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    fn unary(&mut self, a: Var, f: fn(f64) -> f64, op: Op) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())?;
        Ok(self.push(out, op))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat of zero tensors"));
        }
        let m = self.dims(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if r != m {
                return Err(Error::dim(format!("concat_cols row counts {m} and {r} differ")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::from_parts(vec![m, n], out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat of zero tensors"));
        }
        let n = self.dims(parts[0])?.1;
        let mut m = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if c != n {
                return Err(Error::dim(format!("concat_rows column counts {n} and {c} differ")));
            }
            m += r;
            out.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_parts(vec![m, n], out)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if len == 0 || start + len > n {
            return Err(Error::dim(format!("column slice {start}..{} of {n}", start + len)));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let out = Tensor::from_parts(vec![m, len], out)?;
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if len == 0 || start + len > m {
            return Err(Error::dim(format!("row slice {start}..{} of {m}", start + len)));
        }
        let out = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::from_parts(vec![len, n], out)?;
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if rows.is_empty() {
            return Err(Error::dim("gather of zero rows"));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::dim(format!("row {r} out of range for {m} rows")));
            }
            out.extend_from_slice(x.row(r));
        }
        let out = Tensor::from_parts(vec![rows.len(), n], out)?;
        Ok(self.push(out, Op::GatherRows(a, rows.to_vec())))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Row-wise softmax; a vector is a single row.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = super::tensor::softmax(self.value(a))?;
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    /// `a[m×n]` with row `r` multiplied by `c[r]`.
    pub fn scale_rows(&mut self, a: Var, c: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let s = self.value(c);
        if s.len() != m {
            return Err(Error::dim(format!("{} row scales for {m} rows", s.len())));
        }
        let x = self.value(a);
        let mut out = x.data().to_vec();
        for r in 0..m {
            let sv = s.data()[r];
            for o in &mut out[r * n..(r + 1) * n] {
                *o *= sv;
            }
        }
        let out = Tensor::from_parts(vec![m, n], out)?;
        Ok(self.push(out, Op::ScaleRows(a, c)))
    }

    /// Sum over columns: `[m×n] -> [m×1]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (m, _) = self.dims(a)?;
        let x = self.value(a);
        let out = (0..m).map(|r| x.row(r).iter().sum()).collect();
        let out = Tensor::from_parts(vec![m, 1], out)?;
        Ok(self.push(out, Op::RowSum(a)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let out = Tensor::from_parts(vec![1], vec![s])?;
        Ok(self.push(out, Op::Sum(a)))
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let l = super::tensor::mse_loss(self.value(pred), self.value(target))?;
        let out = Tensor::from_parts(vec![1], vec![l])?;
        Ok(self.push(out, Op::Mse(pred, target)))
    }

    /// Propagates `d loss / d node` back through the tape and adds the
    /// parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    if store.value(*id).shape() != g.shape() {
                        return Err(Error::dim(format!(
                            "gradient shape {:?} for parameter '{}'",
                            g.shape(),
                            store.name(*id)
                        )));
                    }
                    store.accumulate_grad(*id, &g);
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (m, k) = av.matrix_dims()?;
                    let n = bv.matrix_dims()?.1;
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g.data(), bv.data(), &mut ga, m, n, k);
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(av.data(), g.data(), &mut gb, m, k, n);
                    accumulate(&mut grads, *a, av.shape(), ga);
                    accumulate(&mut grads, *b, bv.shape(), gb);
                }
                Op::Add(a, b) => {
                    self.broadcast_back(&mut grads, *a, &g, 1.0);
                    self.broadcast_back(&mut grads, *b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    self.broadcast_back(&mut grads, *a, &g, 1.0);
                    self.broadcast_back(&mut grads, *b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = broadcast_binary(&g, bv, |x, y| x * y)?;
                    let gb = broadcast_binary(&g, av, |x, y| x * y)?;
                    self.broadcast_back(&mut grads, *a, &ga, 1.0);
                    self.broadcast_back(&mut grads, *b, &gb, 1.0);
                }
                Op::Scale(a, c) => {
                    let ga = g.data().iter().map(|v| v * c).collect();
                    accumulate(&mut grads, *a, g.shape(), ga);
                }
                Op::AddBias(a, bias) => {
                    let (m, n) = g.matrix_dims()?;
                    let mut gb = vec![0.0; n];
                    for r in 0..m {
                        for (acc, v) in gb.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    let bshape = self.value(*bias).shape().to_vec();
                    accumulate(&mut grads, *bias, &bshape, gb);
                    let gshape = g.shape().to_vec();
                    accumulate(&mut grads, *a, &gshape, g.into_data());
                }
                Op::Sigmoid(a) => {
                    let ga = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, y)| gv * y * (1.0 - y))
                        .collect();
                    accumulate(&mut grads, *a, g.shape(), ga);
                }
                Op::Tanh(a) => {
                    let ga = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, y)| gv * (1.0 - y * y))
                        .collect();
                    accumulate(&mut grads, *a, g.shape(), ga);
                }
                Op::Relu(a) => {
                    let ga = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, g.shape(), ga);
                }
                Op::ConcatCols(parts) => {
                    let (m, n) = g.matrix_dims()?;
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let w = pv.cols();
                        let mut gp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            gp.extend_from_slice(&g.data()[r * n + offset..r * n + offset + w]);
                        }
                        let shape = pv.shape().to_vec();
                        accumulate(&mut grads, *p, &shape, gp);
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let len = pv.len();
                        let shape = pv.shape().to_vec();
                        accumulate(&mut grads, *p, &shape, g.data()[offset..offset + len].to_vec());
                        offset += len;
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let (m, n) = av.matrix_dims()?;
                    let w = g.cols();
                    let mut ga = vec![0.0; m * n];
                    for r in 0..m {
                        ga[r * n + start..r * n + start + w].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, av.shape(), ga);
                }
                Op::SliceRows(a, start) => {
                    let av = self.value(*a);
                    let n = av.cols();
                    let mut ga = vec![0.0; av.len()];
                    ga[start * n..start * n + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, av.shape(), ga);
                }
                Op::GatherRows(a, rows) => {
                    let av = self.value(*a);
                    let n = av.cols();
                    let mut ga = vec![0.0; av.len()];
                    for (i, &r) in rows.iter().enumerate() {
                        for (acc, v) in ga[r * n..(r + 1) * n].iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *a, av.shape(), ga);
                }
                Op::Transpose(a) => {
                    let gt = g.transpose()?;
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, &shape, gt.into_data());
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, &shape, g.into_data());
                }
                Op::SoftmaxRows(a) => {
                    let (m, n) = node.value.matrix_dims()?;
                    let y = node.value.data();
                    let mut ga = vec![0.0; m * n];
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            ga[r * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, node.value.shape(), ga);
                }
                Op::ScaleRows(a, c) => {
                    let av = self.value(*a);
                    let cv = self.value(*c);
                    let (m, n) = av.matrix_dims()?;
                    let mut ga = vec![0.0; m * n];
                    let mut gc = vec![0.0; m];
                    for r in 0..m {
                        let s = cv.data()[r];
                        let gr = g.row(r);
                        for j in 0..n {
                            ga[r * n + j] = gr[j] * s;
                        }
                        gc[r] = gr.iter().zip(av.row(r)).map(|(x, y)| x * y).sum();
                    }
                    accumulate(&mut grads, *a, av.shape(), ga);
                    accumulate(&mut grads, *c, cv.shape(), gc);
                }
                Op::RowSum(a) => {
                    let av = self.value(*a);
                    let (m, n) = av.matrix_dims()?;
                    let mut ga = Vec::with_capacity(m * n);
                    for r in 0..m {
                        ga.extend(std::iter::repeat_n(g.data()[r], n));
                    }
                    accumulate(&mut grads, *a, av.shape(), ga);
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    let gv = g.data()[0];
                    accumulate(&mut grads, *a, av.shape(), vec![gv; av.len()]);
                }
                Op::Mse(p, t) => {
                    let pv = self.value(*p);
                    let tv = self.value(*t);
                    let scale = 2.0 * g.data()[0] / pv.len() as f64;
                    let gp: Vec<f64> = pv
                        .data()
                        .iter()
                        .zip(tv.data())
                        .map(|(a, b)| scale * (a - b))
                        .collect();
                    let gt = gp.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *p, pv.shape(), gp);
                    accumulate(&mut grads, *t, tv.shape(), gt);
                }
            }
        }
        Ok(())
    }

    fn broadcast_back(&self, grads: &mut [Option<Tensor>], target: Var, g: &Tensor, sign: f64) {
        let tv = self.value(target);
        if tv.len() == g.len() {
            accumulate(grads, target, tv.shape(), g.data().iter().map(|v| sign * v).collect());
        } else {
            let s: f64 = g.data().iter().sum();
            accumulate(grads, target, tv.shape(), vec![sign * s]);
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::zeros(shape));
            slot.as_mut().unwrap().data_mut().copy_from_slice(&g);
        }
    }
}
