use std::fmt;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherCols(Var, Vec<usize>),
    Transpose(Var),
    RepeatRows(Var, usize),
    Reshape(Var),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Custom(op, _) => write!(f, "Custom({})", op.name()),
            Op::Leaf => write!(f, "Leaf"),
            _ => write!(f, "Op"),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run record of a computation. Nodes are appended in evaluation
/// order, so the vector itself is a topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: strides describe in-bounds row-major views of slices whose
    // lengths were checked against the operand shapes by the caller.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn grad_or_zero(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn binary_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !va.same_shape(vb) {
            return Err(Error::shape(name, va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.nodes[a.0].value.map(f);
        let needs = self.needs(&[a]);
        self.push(value, op, needs)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        self.unary(a, |x| x + offset, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `log(1 + e^x)`, evaluated without overflow for large `|x|`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            va.data(),
            (k as isize, 1),
            vb.data(),
            (n as isize, 1),
            &mut out,
            0.0,
        );
        let value = Tensor::matrix(m, n, out)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), needs))
    }

    /// Sum of all entries, as a `[1, 1]` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), needs)
    }

    /// Row sums: `[r, c] -> [r, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let c = v.cols();
        let data: Vec<f64> = v.data().chunks(c.max(1)).map(|r| r.iter().sum()).collect();
        let value = Tensor::new(vec![v.rows(), 1], data).expect("row sums");
        let needs = self.needs(&[a]);
        self.push(value, Op::SumCols(a), needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.nodes[parts[0].0].value.rows();
        let mut cols = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    self.nodes[parts[0].0].value.shape(),
                    v.shape(),
                ));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let v = &self.nodes[p.0].value;
                let c = v.cols();
                data.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let value = Tensor::matrix(rows, cols, data)?;
        let needs = self.needs(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if start > end || end > v.cols() {
            return Err(Error::shape("slice_cols", v.shape(), &[start, end]));
        }
        let (rows, c) = (v.rows(), v.cols());
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&v.data()[r * c + start..r * c + end]);
        }
        let value = Tensor::matrix(rows, end - start, data)?;
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start), needs))
    }

    /// Output column `j` is input column `index[j]`.
    pub fn gather_cols(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let c = v.cols();
        if let Some(&bad) = index.iter().find(|&&i| i >= c) {
            return Err(Error::shape("gather_cols", v.shape(), &[bad]));
        }
        let rows = v.rows();
        let mut data = Vec::with_capacity(rows * index.len());
        for r in 0..rows {
            data.extend(index.iter().map(|&i| v.data()[r * c + i]));
        }
        let value = Tensor::matrix(rows, index.len(), data)?;
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::GatherCols(a, index.to_vec()), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let (r, c) = (v.rows(), v.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = v.data()[i * c + j];
            }
        }
        let value = Tensor::matrix(c, r, data).expect("transpose");
        let needs = self.needs(&[a]);
        self.push(value, Op::Transpose(a), needs)
    }

    /// Broadcast by stacking `times` copies of `a` vertically.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let v = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(v.len() * times);
        for _ in 0..times {
            data.extend_from_slice(v.data());
        }
        let value = Tensor::matrix(v.rows() * times, v.cols(), data).expect("repeat");
        let needs = self.needs(&[a]);
        self.push(value, Op::RepeatRows(a, times), needs)
    }

    /// Broadcast a `[1, c]` row to `[rows, c]`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        if v.rows() != 1 {
            return Err(Error::shape("broadcast_rows", v.shape(), &[rows, v.cols()]));
        }
        Ok(self.repeat_rows(a, rows))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let value = Tensor::new(shape.to_vec(), v.data().to_vec())
            .map_err(|_| Error::shape("reshape", v.shape(), shape))?;
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::Reshape(a), needs))
    }

    /// `x @ w + b` with `b` a `[1, out]` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let rows = self.value(xw).rows();
        let bb = self.broadcast_rows(b, rows)?;
        self.add(xw, bb)
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Var {
        let needs = self.needs(inputs);
        self.push(output, Op::Custom(op, inputs.to_vec()), needs)
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate across calls
    /// until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut pending: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        pending[loss.0] = Some(Tensor::full(&shape, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = pending[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            for (parent, pg) in self.local_grads(idx, &g) {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut pending[parent.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(pg.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                if self.grads.len() < self.nodes.len() {
                    self.grads.resize_with(self.nodes.len(), || None);
                }
                match &mut self.grads[idx] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let zip = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            let data = a.data().iter().zip(g.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data).expect("same shape")
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, zip(val(b), &|y, gg| y * gg)),
                (*b, zip(val(a), &|x, gg| x * gg)),
            ],
            Op::Div(a, b) => {
                let vb = val(b);
                let ga = zip(vb, &|y, gg| gg / y);
                let data = out
                    .data()
                    .iter()
                    .zip(vb.data())
                    .zip(g.data())
                    .map(|((&q, &y), &gg)| -gg * q / y)
                    .collect();
                let gb = Tensor::new(vb.shape().to_vec(), data).expect("same shape");
                vec![(*a, ga), (*b, gb)]
            }
            Op::Neg(a) => vec![(*a, g.map(|x| -x))],
            Op::Scale(a, f) => vec![(*a, g.map(|x| x * f))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::MatMul(a, b) => {
                let (va, vb) = (val(a), val(b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                let mut ga = vec![0.0; m * k];
                // dA = dC · Bᵀ
                gemm(
                    m,
                    n,
                    k,
                    g.data(),
                    (n as isize, 1),
                    vb.data(),
                    (1, n as isize),
                    &mut ga,
                    0.0,
                );
                let mut gb = vec![0.0; k * n];
                // dB = Aᵀ · dC
                gemm(
                    k,
                    m,
                    n,
                    va.data(),
                    (1, k as isize),
                    g.data(),
                    (n as isize, 1),
                    &mut gb,
                    0.0,
                );
                vec![
                    (*a, Tensor::matrix(m, k, ga).expect("grad a")),
                    (*b, Tensor::matrix(k, n, gb).expect("grad b")),
                ]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(a).shape(), g.item()))],
            Op::Mean(a) => {
                let va = val(a);
                vec![(*a, Tensor::full(va.shape(), g.item() / va.len() as f64))]
            }
            Op::SumCols(a) => {
                let va = val(a);
                let c = va.cols();
                let data = (0..va.len()).map(|i| g.data()[i / c]).collect();
                vec![(*a, Tensor::new(va.shape().to_vec(), data).expect("sum cols"))]
            }
            Op::Exp(a) => vec![(*a, zip(out, &|y, gg| y * gg))],
            Op::Log(a) => vec![(*a, zip(val(a), &|x, gg| gg / x))],
            Op::Tanh(a) => vec![(*a, zip(out, &|y, gg| (1.0 - y * y) * gg))],
            Op::Sigmoid(a) => vec![(*a, zip(out, &|y, gg| y * (1.0 - y) * gg))],
            Op::Softplus(a) => vec![(*a, zip(val(a), &|x, gg| sigmoid(x) * gg))],
            Op::Square(a) => vec![(*a, zip(val(a), &|x, gg| 2.0 * x * gg))],
            Op::ConcatCols(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for p in parts {
                    let c = val(p).cols();
                    let mut data = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                    }
                    res.push((*p, Tensor::new(val(p).shape().to_vec(), data).expect("concat")));
                    offset += c;
                }
                res
            }
            Op::SliceCols(a, start) => {
                let va = val(a);
                let (rows, c, w) = (va.rows(), va.cols(), out.cols());
                let mut data = vec![0.0; va.len()];
                for r in 0..rows {
                    data[r * c + start..r * c + start + w]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                vec![(*a, Tensor::new(va.shape().to_vec(), data).expect("slice"))]
            }
            Op::GatherCols(a, index) => {
                let va = val(a);
                let (rows, c, w) = (va.rows(), va.cols(), index.len());
                let mut data = vec![0.0; va.len()];
                for r in 0..rows {
                    for (j, &i) in index.iter().enumerate() {
                        data[r * c + i] += g.data()[r * w + j];
                    }
                }
                vec![(*a, Tensor::new(va.shape().to_vec(), data).expect("gather"))]
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        data[j * r + i] = g.data()[i * c + j];
                    }
                }
                vec![(*a, Tensor::new(val(a).shape().to_vec(), data).expect("transpose"))]
            }
            Op::RepeatRows(a, times) => {
                let va = val(a);
                let n = va.len();
                let mut data = vec![0.0; n];
                for t in 0..*times {
                    for (d, s) in data.iter_mut().zip(&g.data()[t * n..(t + 1) * n]) {
                        *d += s;
                    }
                }
                vec![(*a, Tensor::new(va.shape().to_vec(), data).expect("repeat"))]
            }
            Op::Reshape(a) => {
                let va = val(a);
                vec![(*a, Tensor::new(va.shape().to_vec(), g.data().to_vec()).expect("reshape"))]
            }
            Op::Custom(op, inputs) => {
                let ins: Vec<&Tensor> = inputs.iter().map(val).collect();
                inputs
                    .iter()
                    .copied()
                    .zip(op.backward(&ins, out, g))
                    .collect()
            }
        }
    }
}
