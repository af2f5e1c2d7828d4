//! Dense row-major `f64` tensors and a reverse-mode tape.
//!
//! A [`Tape`] is built for one forward pass: inputs and parameters are
//! registered as leaves, every primitive appends a node, and
//! [`Tape::backward`] consumes the tape and returns the gradients of every
//! node that depends on a parameter. Nodes are appended in evaluation order,
//! so the tape is topologically sorted by construction and the backward sweep
//! is a single reverse walk.
//!
//! Only the primitives the MLP and the CW attack need are provided.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        ensure_finite("tensor", &data)?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    /// Skips the finiteness scan. Callers must have checked the data.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view for in-place parameter updates; callers must keep the
    /// values finite.
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!(
                "item() on a tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Rows `idx` gathered into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::from_parts(vec![idx.len(), c], data)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, (k, 1), &other.data, (n, 1), &mut out, false);
        ensure_finite("matmul", &out)?;
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    /// `self · otherᵀ`; with `other` stored `[out × in]` this is a dense layer.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul_t")?;
        let (n, k2) = other.dims2("matmul_t")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_t",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, (k, 1), &other.data, (1, k), &mut out, false);
        ensure_finite("matmul_t", &out)?;
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, n) = self.dims2("add_bias")?;
        if bias.numel() != n {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let mut out = self.data.clone();
        for row in out.chunks_exact_mut(n) {
            for (o, b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        ensure_finite("add_bias", &out)?;
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    pub fn relu(&self) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| v.max(0.0)).collect(),
        )
    }
}

/// `c (+)= a · b` for row-major `m×k` and `k×n` operands described by
/// (row stride, column stride).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches given
    // the strides, which describe dense row-major or transposed layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Adds a constant; the gradient passes through unchanged.
    Shift(Var),
    Sum(Var),
    L2Norm(Var),
    SoftmaxCe {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

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

    /// A constant input; no gradient is produced for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_flag(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(())
        } else {
            Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn unary(
        &mut self,
        op_name: &'static str,
        a: Var,
        op: Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var> {
        let src = self.value(a);
        let data: Vec<f64> = src.data.iter().map(|&x| f(x)).collect();
        ensure_finite(op_name, &data)?;
        let value = Tensor::from_parts(src.shape.clone(), data);
        let rg = self.grad_flag(&[a]);
        Ok(self.push(value, op, rg))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data: Vec<f64> = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        ensure_finite(op_name, &data)?;
        let value = Tensor::from_parts(va.shape.clone(), data);
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(self.value(b))?;
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(value, Op::MatMulT(a, b), rg))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.value(a).add_bias(self.value(bias))?;
        let rg = self.grad_flag(&[a, bias]);
        Ok(self.push(value, Op::AddBias(a, bias), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, Op::Tanh(a), f64::tanh)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary("scale", a, Op::Scale(a, k), |x| k * x)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `a + offset` for a constant `offset` of the same shape.
    pub fn shift(&mut self, a: Var, offset: &Tensor) -> Result<Var> {
        let va = self.value(a);
        if va.shape() != offset.shape() {
            return Err(Error::Shape {
                op: "shift",
                lhs: va.shape.clone(),
                rhs: offset.shape.clone(),
            });
        }
        let data: Vec<f64> = va.data.iter().zip(&offset.data).map(|(x, y)| x + y).collect();
        ensure_finite("shift", &data)?;
        let value = Tensor::from_parts(va.shape.clone(), data);
        let rg = self.grad_flag(&[a]);
        Ok(self.push(value, Op::Shift(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data.iter().sum();
        ensure_finite("sum", &[s])?;
        let rg = self.grad_flag(&[a]);
        Ok(self.push(Tensor::from_parts(vec![1], vec![s]), Op::Sum(a), rg))
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).l2_norm();
        ensure_finite("l2_norm", &[n])?;
        let rg = self.grad_flag(&[a]);
        Ok(self.push(Tensor::from_parts(vec![1], vec![n]), Op::L2Norm(a), rg))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let (m, c) = z.dims2("softmax_cross_entropy")?;
        if labels.len() != m {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: z.shape.clone(),
                rhs: vec![labels.len()],
            });
        }
        check_labels(labels, c)?;
        let mut probs = Vec::with_capacity(m * c);
        let mut total = 0.0;
        for (row, &t) in z.data.chunks_exact(c).zip(labels) {
            let (loss, p) = softmax_ce_row(row, t);
            total += loss;
            probs.extend(p);
        }
        let loss = total / m as f64;
        ensure_finite("softmax_cross_entropy", &[loss])?;
        let rg = self.grad_flag(&[logits]);
        Ok(self.push(
            Tensor::from_parts(vec![1], vec![loss]),
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a one-element `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Op::Leaf, Some(g)) = (&node.op, g) {
                ensure_finite("backward", g)?;
            }
        }
        let shapes = self.nodes.into_iter().map(|n| n.value.shape).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        // Only allocate for inputs that actually need a gradient.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
                f(buf);
            }
        };
        let val = |v: Var| &nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2("matmul")?;
                let n = val(*b).cols();
                // dA = G·Bᵀ, dB = Aᵀ·G
                let bv = &val(*b).data;
                acc(*a, &mut |ga| gemm(m, n, k, g, (n, 1), bv, (1, n), ga, true));
                let av = &val(*a).data;
                acc(*b, &mut |gb| gemm(k, m, n, av, (1, k), g, (n, 1), gb, true));
            }
            Op::MatMulT(a, b) => {
                let (m, k) = val(*a).dims2("matmul_t")?;
                let n = val(*b).rows();
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                let bv = &val(*b).data;
                acc(*a, &mut |ga| gemm(m, n, k, g, (n, 1), bv, (k, 1), ga, true));
                let av = &val(*a).data;
                acc(*b, &mut |gb| gemm(n, m, k, g, (1, n), av, (k, 1), gb, true));
            }
            Op::AddBias(a, bias) => {
                acc(*a, &mut |ga| add_into(ga, g));
                let n = val(*bias).numel();
                acc(*bias, &mut |gb| {
                    for row in g.chunks_exact(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Relu(a) => {
                let x = &val(*a).data;
                acc(*a, &mut |ga| {
                    for ((o, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        if xi > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value.data;
                acc(*a, &mut |ga| {
                    for ((o, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                        *o += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (o, &gi) in gb.iter_mut().zip(g) {
                        *o -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&val(*a).data, &val(*b).data);
                acc(*a, &mut |ga| {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                });
            }
            Op::Scale(a, k) => {
                acc(*a, &mut |ga| {
                    for (o, &gi) in ga.iter_mut().zip(g) {
                        *o += k * gi;
                    }
                });
            }
            Op::Shift(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Sum(a) => {
                acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::L2Norm(a) => {
                let n = node.value.data[0];
                let x = &val(*a).data;
                if n > 0.0 {
                    acc(*a, &mut |ga| {
                        for (o, &xi) in ga.iter_mut().zip(x) {
                            *o += g[0] * xi / n;
                        }
                    });
                }
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
            } => {
                let c = val(*logits).cols();
                let scale = g[0] / labels.len() as f64;
                acc(*logits, &mut |gl| {
                    for (r, &t) in labels.iter().enumerate() {
                        let row = &mut gl[r * c..(r + 1) * c];
                        let p = &probs[r * c..(r + 1) * c];
                        for (j, (o, &pj)) in row.iter_mut().zip(p).enumerate() {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            *o += scale * (pj - onehot);
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        Some((row, &label)) => Err(Error::LabelOutOfRange {
            row,
            label,
            classes,
        }),
        None => Ok(()),
    }
}

/// Loss and softmax probabilities of one row, stabilised by max-subtraction.
pub(crate) fn softmax_ce_row(row: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (row[label] - max);
    (loss.max(0.0), exps.into_iter().map(|e| e / sum).collect())
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        self.get(v)
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.to_vec()))
    }

    pub(crate) fn get_mut(&mut self, v: Var) -> Option<&mut [f64]> {
        self.grads.get_mut(v.0).and_then(|g| g.as_deref_mut())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
