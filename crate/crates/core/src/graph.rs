//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass. Handles
//! into the tape are [`Var`]s. [`Graph::backward`] consumes the graph, so a tape
//! is never replayed twice.

use crate::kernels;
use crate::tensor::{Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddN(Vec<Var>),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `x * s` where `s` is a single-element tensor.
    ScaleBy(Var, Var),
    /// `a * x + b` with constants; only `a` matters for the gradient.
    Affine(Var, S),
    MulConst(Var, Tensor<S>),
    /// `x[r, c] * v[r]`
    MulRows(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Sqrt(Var),
    Recip(Var),
    Softmax(Var, usize),
    LogSoftmax(Var),
    TopkMean(Var, Vec<usize>),
    /// per-column selected row indices
    TopkMeanCols(Var, Vec<Vec<usize>>),
    Conv1d(Var, Var, Var),
    ConcatCols(Var, Var),
    Column(Var, usize),
    SumAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Reshape(Var),
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::AddN(..) => "add_n",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::ScaleBy(..) => "scale_by",
            Op::Affine(..) => "affine",
            Op::MulConst(..) => "mul_const",
            Op::MulRows(..) => "mul_rows",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Abs(..) => "abs",
            Op::Sqrt(..) => "sqrt",
            Op::Recip(..) => "recip",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::TopkMean(..) => "topk_mean",
            Op::TopkMeanCols(..) => "topk_mean_cols",
            Op::Conv1d(..) => "conv1d",
            Op::ConcatCols(..) => "concat_cols",
            Op::Column(..) => "column",
            Op::SumAll(..) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::MeanAxis(..) => "mean_axis",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `v`; zeros if no path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Autodiff tape. One graph per forward pass.
pub struct Graph<S = f32> {
    nodes: Vec<Node<S>>,
    grad_fault: Option<&'static str>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), TensorError> {
    if a != b {
        return Err(TensorError::shape(op, format!("{:?} vs {:?}", a, b)));
    }
    Ok(())
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_fault: None,
        }
    }

    /// Corrupts the backward rule of the named op (scales its upstream gradient by 1.5).
    /// Only used to self-test the gradient checker.
    #[doc(hidden)]
    pub fn inject_grad_fault(&mut self, op: &'static str) {
        self.grad_fault = Some(op);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t, true)
    }

    /// Records a leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = self
            .inputs(&op)
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<S>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::ScaleBy(a, b)
            | Op::MulRows(a, b)
            | Op::ConcatCols(a, b) => vec![*a, *b],
            Op::AddN(vs) => vs.clone(),
            Op::Conv1d(x, w, b) => vec![*x, *w, *b],
            Op::Transpose(x)
            | Op::Affine(x, _)
            | Op::MulConst(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Abs(x)
            | Op::Sqrt(x)
            | Op::Recip(x)
            | Op::Softmax(x, _)
            | Op::LogSoftmax(x)
            | Op::TopkMean(x, _)
            | Op::TopkMeanCols(x, _)
            | Op::Column(x, _)
            | Op::SumAll(x)
            | Op::SumAxis(x, _)
            | Op::MeanAxis(x, _)
            | Op::Reshape(x) => vec![*x],
        }
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(TensorError::shape(
                op,
                format!("expected rank 2, got {:?}", s),
            )),
        }
    }

    fn unary(&mut self, op: Op<S>, x: Var, f: impl Fn(S) -> S) -> Result<Var, TensorError> {
        let value = self.value(x).map(f);
        self.push(op, value)
    }

    fn binary(
        &mut self,
        name: &'static str,
        op: Op<S>,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
    ) -> Result<Var, TensorError> {
        check_same(name, self.shape(a), self.shape(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(op, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::shape(
                "matmul",
                format!("[{m}x{k}] x [{k2}x{n}]: inner dims differ"),
            ));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let value = Tensor::matrix(m, n, out)?;
        self.push(Op::MatMul(a, b), value)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2("transpose", x)?;
        let src = self.value(x).data();
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::matrix(c, r, out)?;
        self.push(Op::Transpose(x), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", Op::Add(a, b), a, b, |x, y| x + y)
    }

    /// Sum of same-shaped tensors.
    pub fn add_n(&mut self, vs: &[Var]) -> Result<Var, TensorError> {
        let first = *vs
            .first()
            .ok_or_else(|| TensorError::arg("add_n", "no operands"))?;
        let mut acc = self.value(first).clone();
        for &v in &vs[1..] {
            check_same("add_n", acc.shape(), self.shape(v))?;
            for (a, &b) in acc.data_mut().iter_mut().zip(self.value(v).data()) {
                *a += b;
            }
        }
        self.push(Op::AddN(vs.to_vec()), acc)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("div", Op::Div(a, b), a, b, |x, y| x / y)
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        if self.value(s).len() != 1 {
            return Err(TensorError::shape(
                "scale_by",
                format!("scale must hold one value, got {:?}", self.shape(s)),
            ));
        }
        let sv = self.value(s).item();
        let value = self.value(x).map(|v| v * sv);
        self.push(Op::ScaleBy(x, s), value)
    }

    /// `a * x + b` with constant `a`, `b`.
    pub fn affine(&mut self, x: Var, a: S, b: S) -> Result<Var, TensorError> {
        let value = self.value(x).map(|v| a * v + b);
        self.push(Op::Affine(x, a), value)
    }

    pub fn scale(&mut self, x: Var, a: S) -> Result<Var, TensorError> {
        self.affine(x, a, S::zero())
    }

    /// Elementwise product with a constant tensor (e.g. a dropout mask).
    pub fn mul_const(&mut self, x: Var, c: Tensor<S>) -> Result<Var, TensorError> {
        check_same("mul_const", self.shape(x), c.shape())?;
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let value = Tensor::new(c.shape().to_vec(), data)?;
        self.push(Op::MulConst(x, c), value)
    }

    /// Scales row `r` of `x` by `v[r]`.
    pub fn mul_rows(&mut self, x: Var, v: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2("mul_rows", x)?;
        if self.shape(v) != [r] {
            return Err(TensorError::shape(
                "mul_rows",
                format!("rows {} vs scale vector {:?}", r, self.shape(v)),
            ));
        }
        let (tx, tv) = (self.value(x).data(), self.value(v).data());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(tx[i * c..(i + 1) * c].iter().map(|&a| tv[i] * a));
        }
        let value = Tensor::matrix(r, c, out)?;
        self.push(Op::MulRows(x, v), value)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(
            Op::Relu(x),
            x,
            |v| if v > S::zero() { v } else { S::zero() },
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Op::Sigmoid(x), x, sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Op::Abs(x), x, |v| v.abs())
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, TensorError> {
        if self.value(x).data().iter().any(|&v| v < S::zero()) {
            return Err(TensorError::arg("sqrt", "negative input"));
        }
        self.unary(Op::Sqrt(x), x, |v| v.sqrt())
    }

    pub fn recip(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Op::Recip(x), x, |v| S::one() / v)
    }

    /// Max-subtracted softmax along `axis` of a rank-1 or rank-2 tensor.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        let (outer, len, stride) = lanes("softmax", t.shape(), axis)?;
        let src = t.data();
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            let base = lane_base(o, len, stride);
            let mut m = S::neg_infinity();
            for i in 0..len {
                m = m.max(src[base + i * stride]);
            }
            let mut z = S::zero();
            for i in 0..len {
                let e = (src[base + i * stride] - m).exp();
                out[base + i * stride] = e;
                z += e;
            }
            for i in 0..len {
                out[base + i * stride] /= z;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(Op::Softmax(x, axis), value)
    }

    /// Log-softmax of a vector.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() != 1 || t.is_empty() {
            return Err(TensorError::shape(
                "log_softmax",
                format!("{:?}", t.shape()),
            ));
        }
        let m = t.data().iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let lz = t.data().iter().map(|&v| (v - m).exp()).sum::<S>().ln() + m;
        let value = t.map(|v| v - lz);
        self.push(Op::LogSoftmax(x), value)
    }

    /// Mean of the `k` largest entries of a vector; ties go to the lowest index.
    pub fn topk_mean(&mut self, x: Var, k: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() != 1 {
            return Err(TensorError::shape("topk_mean", format!("{:?}", t.shape())));
        }
        if k == 0 || k > t.len() {
            return Err(TensorError::arg(
                "topk_mean",
                format!("k={} outside 1..={}", k, t.len()),
            ));
        }
        let idx = kernels::topk_indices(t.data(), k);
        let mean = idx.iter().map(|&i| t.data()[i]).sum::<S>() / S::lit(k as f64);
        self.push(Op::TopkMean(x, idx), Tensor::scalar(mean))
    }

    /// Column-wise [`Graph::topk_mean`] of a `T×C` matrix, giving a length-`C` vector.
    pub fn topk_mean_cols(&mut self, x: Var, k: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims2("topk_mean_cols", x)?;
        if k == 0 || k > r {
            return Err(TensorError::arg(
                "topk_mean_cols",
                format!("k={} outside 1..={}", k, r),
            ));
        }
        let t = self.value(x);
        let mut sel = Vec::with_capacity(c);
        let mut out = Vec::with_capacity(c);
        for j in 0..c {
            let col = t.column(j);
            let idx = kernels::topk_indices(&col, k);
            out.push(idx.iter().map(|&i| col[i]).sum::<S>() / S::lit(k as f64));
            sel.push(idx);
        }
        self.push(Op::TopkMeanCols(x, sel), Tensor::vector(out))
    }

    /// Same-padded temporal convolution. `x: T×Cin`, `w: K×Cin×Cout`, `b: Cout`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (t, cin) = self.dims2("conv1d", x)?;
        let (kw, wcin, cout) = match *self.shape(w) {
            [k, ci, co] => (k, ci, co),
            ref s => return Err(TensorError::shape("conv1d", format!("kernel {:?}", s))),
        };
        if kw % 2 == 0 {
            return Err(TensorError::arg(
                "conv1d",
                format!("kernel width {} is even", kw),
            ));
        }
        if wcin != cin || self.shape(b) != [cout] {
            return Err(TensorError::shape(
                "conv1d",
                format!(
                    "input {:?}, kernel {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(w),
                    self.shape(b)
                ),
            ));
        }
        let out = kernels::conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            t,
            cin,
            cout,
            kw,
        );
        let value = Tensor::matrix(t, cout, out)?;
        self.push(Op::Conv1d(x, w, b), value)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ra, ca) = self.dims2("concat_cols", a)?;
        let (rb, cb) = self.dims2("concat_cols", b)?;
        if ra != rb {
            return Err(TensorError::shape(
                "concat_cols",
                format!("rows {} vs {}", ra, rb),
            ));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(ta.row(i));
            out.extend_from_slice(tb.row(i));
        }
        let value = Tensor::matrix(ra, ca + cb, out)?;
        self.push(Op::ConcatCols(a, b), value)
    }

    pub fn column(&mut self, x: Var, j: usize) -> Result<Var, TensorError> {
        let (_, c) = self.dims2("column", x)?;
        if j >= c {
            return Err(TensorError::arg("column", format!("column {} of {}", j, c)));
        }
        let value = Tensor::vector(self.value(x).column(j));
        self.push(Op::Column(x, j), value)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data().iter().copied().sum::<S>();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, S::one() / S::lit(n as f64))
    }

    /// Sums a rank-2 tensor over `axis`, giving a vector.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let value = reduce_axis("sum_axis", self.value(x), axis, false)?;
        self.push(Op::SumAxis(x, axis), value)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let value = reduce_axis("mean_axis", self.value(x), axis, true)?;
        self.push(Op::MeanAxis(x, axis), value)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push(Op::Reshape(x), value)
    }

    /// Runs reverse-mode differentiation from a scalar loss and clears the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::arg(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; n];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), S::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if self.grad_fault == Some(node.op.name()) {
                g = g.map(|v| v * S::lit(1.5));
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, f: impl FnOnce(&mut [S])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.shape(v)));
        f(slot.data_mut());
    }

    fn propagate(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        let val = |v: Var| self.value(v).data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = y.shape()[1];
                self.accumulate(grads, *a, |ga| {
                    kernels::matmul_nt_acc(gd, val(*b), ga, m, n, k)
                });
                self.accumulate(grads, *b, |gb| {
                    kernels::matmul_tn_acc(val(*a), gd, gb, m, k, n)
                });
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2().unwrap();
                self.accumulate(grads, *x, |gx| {
                    for ii in 0..r {
                        for j in 0..c {
                            gx[ii * c + j] += gd[j * r + ii];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                self.accumulate(grads, *b, |gb| add_into(gb, gd));
            }
            Op::AddN(vs) => {
                for v in vs {
                    self.accumulate(grads, *v, |gv| add_into(gv, gd));
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                self.accumulate(grads, *b, |gb| {
                    for (o, &d) in gb.iter_mut().zip(gd) {
                        *o -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                self.accumulate(grads, *a, |ga| {
                    for ((o, &d), &bv) in ga.iter_mut().zip(gd).zip(vb) {
                        *o += d * bv;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, &d), &av) in gb.iter_mut().zip(gd).zip(va) {
                        *o += d * av;
                    }
                });
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                let yd = y.data();
                self.accumulate(grads, *a, |ga| {
                    for ((o, &d), &bv) in ga.iter_mut().zip(gd).zip(vb) {
                        *o += d / bv;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (((o, &d), &bv), &yv) in gb.iter_mut().zip(gd).zip(vb).zip(yd) {
                        *o -= d * yv / bv;
                    }
                });
            }
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).item();
                let vx = val(*x);
                self.accumulate(grads, *x, |gx| {
                    for (o, &d) in gx.iter_mut().zip(gd) {
                        *o += d * sv;
                    }
                });
                self.accumulate(grads, *s, |gs| {
                    gs[0] += gd.iter().zip(vx).map(|(&d, &xv)| d * xv).sum::<S>();
                });
            }
            Op::Affine(x, a) => {
                self.accumulate(grads, *x, |gx| {
                    for (o, &d) in gx.iter_mut().zip(gd) {
                        *o += d * *a;
                    }
                });
            }
            Op::MulConst(x, c) => {
                self.accumulate(grads, *x, |gx| {
                    for ((o, &d), &cv) in gx.iter_mut().zip(gd).zip(c.data()) {
                        *o += d * cv;
                    }
                });
            }
            Op::MulRows(x, v) => {
                let (r, c) = self.value(*x).dims2().unwrap();
                let (vx, vv) = (val(*x), val(*v));
                self.accumulate(grads, *x, |gx| {
                    for ii in 0..r {
                        for j in 0..c {
                            gx[ii * c + j] += gd[ii * c + j] * vv[ii];
                        }
                    }
                });
                self.accumulate(grads, *v, |gv| {
                    for ii in 0..r {
                        let mut s = S::zero();
                        for j in 0..c {
                            s += gd[ii * c + j] * vx[ii * c + j];
                        }
                        gv[ii] += s;
                    }
                });
            }
            Op::Relu(x) => {
                let vx = val(*x);
                self.accumulate(grads, *x, |gx| {
                    for ((o, &d), &xv) in gx.iter_mut().zip(gd).zip(vx) {
                        if xv > S::zero() {
                            *o += d;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yd = y.data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &d), &yv) in gx.iter_mut().zip(gd).zip(yd) {
                        *o += d * yv * (S::one() - yv);
                    }
                });
            }
            Op::Abs(x) => {
                let vx = val(*x);
                self.accumulate(grads, *x, |gx| {
                    for ((o, &d), &xv) in gx.iter_mut().zip(gd).zip(vx) {
                        if xv > S::zero() {
                            *o += d;
                        } else if xv < S::zero() {
                            *o -= d;
                        }
                    }
                });
            }
            Op::Sqrt(x) => {
                let yd = y.data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &d), &yv) in gx.iter_mut().zip(gd).zip(yd) {
                        *o += d / (S::lit(2.0) * yv);
                    }
                });
            }
            Op::Recip(x) => {
                let yd = y.data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &d), &yv) in gx.iter_mut().zip(gd).zip(yd) {
                        *o -= d * yv * yv;
                    }
                });
            }
            Op::Softmax(x, axis) => {
                let (outer, len, stride) = lanes("softmax", y.shape(), *axis).unwrap();
                let yd = y.data();
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        let base = lane_base(o, len, stride);
                        let mut dot = S::zero();
                        for ii in 0..len {
                            let p = base + ii * stride;
                            dot += gd[p] * yd[p];
                        }
                        for ii in 0..len {
                            let p = base + ii * stride;
                            gx[p] += yd[p] * (gd[p] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let yd = y.data();
                let gsum: S = gd.iter().copied().sum();
                self.accumulate(grads, *x, |gx| {
                    for ((o, &d), &yv) in gx.iter_mut().zip(gd).zip(yd) {
                        *o += d - yv.exp() * gsum;
                    }
                });
            }
            Op::TopkMean(x, idx) => {
                let w = gd[0] / S::lit(idx.len() as f64);
                self.accumulate(grads, *x, |gx| {
                    for &ii in idx {
                        gx[ii] += w;
                    }
                });
            }
            Op::TopkMeanCols(x, sel) => {
                let c = sel.len();
                self.accumulate(grads, *x, |gx| {
                    for (j, idx) in sel.iter().enumerate() {
                        let w = gd[j] / S::lit(idx.len() as f64);
                        for &r in idx {
                            gx[r * c + j] += w;
                        }
                    }
                });
            }
            Op::Conv1d(x, w, b) => {
                let (t, cin) = self.value(*x).dims2().unwrap();
                let ws = self.shape(*w);
                let (kw, cout) = (ws[0], ws[2]);
                let mut gx = self.nodes[x.0]
                    .requires_grad
                    .then(|| vec![S::zero(); t * cin]);
                let mut gw = self.nodes[w.0]
                    .requires_grad
                    .then(|| vec![S::zero(); kw * cin * cout]);
                let mut gb = self.nodes[b.0].requires_grad.then(|| vec![S::zero(); cout]);
                kernels::conv1d_backward(
                    val(*x),
                    val(*w),
                    gd,
                    t,
                    cin,
                    cout,
                    kw,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                for (v, part) in [(*x, gx), (*w, gw), (*b, gb)] {
                    if let Some(part) = part {
                        self.accumulate(grads, v, |acc| add_into(acc, &part));
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = self.value(*a).dims2().unwrap();
                let cb = self.shape(*b)[1];
                let c = ca + cb;
                self.accumulate(grads, *a, |ga| {
                    for ii in 0..r {
                        add_into(&mut ga[ii * ca..(ii + 1) * ca], &gd[ii * c..ii * c + ca]);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ii in 0..r {
                        add_into(
                            &mut gb[ii * cb..(ii + 1) * cb],
                            &gd[ii * c + ca..(ii + 1) * c],
                        );
                    }
                });
            }
            Op::Column(x, j) => {
                let c = self.shape(*x)[1];
                self.accumulate(grads, *x, |gx| {
                    for (r, &d) in gd.iter().enumerate() {
                        gx[r * c + j] += d;
                    }
                });
            }
            Op::SumAll(x) => {
                let d = gd[0];
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o += d));
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let (r, c) = self.value(*x).dims2().unwrap();
                let scale = match (&node.op, axis) {
                    (Op::MeanAxis(..), 0) => S::one() / S::lit(r as f64),
                    (Op::MeanAxis(..), _) => S::one() / S::lit(c as f64),
                    _ => S::one(),
                };
                self.accumulate(grads, *x, |gx| {
                    for ii in 0..r {
                        for j in 0..c {
                            let d = if *axis == 0 { gd[j] } else { gd[ii] };
                            gx[ii * c + j] += d * scale;
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |gx| add_into(gx, gd));
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

fn add_into<S: Scalar>(acc: &mut [S], src: &[S]) {
    for (a, &s) in acc.iter_mut().zip(src) {
        *a += s;
    }
}

/// `(number of lanes, lane length, element stride)` for a reduction along `axis`.
fn lanes(
    op: &'static str,
    shape: &[usize],
    axis: usize,
) -> Result<(usize, usize, usize), TensorError> {
    match (shape, axis) {
        (&[n], 0) => Ok((1, n, 1)),
        (&[r, c], 0) => Ok((c, r, c)),
        (&[r, c], 1) => Ok((r, c, 1)),
        _ => Err(TensorError::arg(
            op,
            format!("axis {} for shape {:?}", axis, shape),
        )),
    }
}

/// Offset of the first element of lane `o`.
fn lane_base(o: usize, len: usize, stride: usize) -> usize {
    if stride == 1 {
        o * len
    } else {
        o
    }
}

fn reduce_axis<S: Scalar>(
    op: &'static str,
    t: &Tensor<S>,
    axis: usize,
    mean: bool,
) -> Result<Tensor<S>, TensorError> {
    let (r, c) = match t.shape() {
        &[r, c] => (r, c),
        s => {
            return Err(TensorError::shape(
                op,
                format!("expected rank 2, got {:?}", s),
            ))
        }
    };
    let d = t.data();
    let out = match axis {
        0 => {
            let mut out = vec![S::zero(); c];
            for i in 0..r {
                add_into(&mut out, &d[i * c..(i + 1) * c]);
            }
            if mean {
                let n = S::lit(r as f64);
                out.iter_mut().for_each(|v| *v /= n);
            }
            out
        }
        1 => (0..r)
            .map(|i| {
                let s: S = d[i * c..(i + 1) * c].iter().copied().sum();
                if mean {
                    s / S::lit(c as f64)
                } else {
                    s
                }
            })
            .collect(),
        _ => return Err(TensorError::arg(op, format!("axis {}", axis))),
    };
    Ok(Tensor::vector(out))
}
