//! Reverse-mode tape.
//!
//! Every op appends a node holding its forward value and enough structure to
//! replay the chain rule backwards. Nodes are only differentiated when at
//! least one ancestor leaf was registered with `requires_grad`.

use std::sync::Arc;

use rand::Rng;

use crate::broadcast::Broadcast;
use crate::gemm::gemm;
use crate::{conv, Result, Tensor, TensorError, EPS};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value {
    Owned(Vec<f64>),
    Shared(Arc<Tensor>),
}

impl Value {
    fn as_slice(&self) -> &[f64] {
        match self {
            Value::Owned(v) => v,
            Value::Shared(t) => t.data(),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Elu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softplus(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols { src: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceRows { src: Var, start: usize },
    StraightThrough(Var),
    Conv2d { input: Var, weight: Var, bias: Var, geom: conv::Geometry },
}

struct Node {
    shape: Vec<usize>,
    value: Value,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn last_axis(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node { shape, value: Value::Owned(data), requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a tensor; it participates in differentiation iff its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), rg, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), false, Op::Leaf)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.constant(t))
    }

    /// Registers a shared tensor without copying its data.
    pub fn shared(&mut self, t: Arc<Tensor>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node { shape, value: Value::Shared(t), requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.as_slice()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("tape nodes are always well-formed")
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Copies the value into a fresh constant node (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let shape = self.shape(v).to_vec();
        let data = self.value(v).to_vec();
        self.push(shape, data, false, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Dimension(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let bc = Broadcast::new(self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<f64> = (0..bc.numel()).map(|i| f(va[bc.a_index(i)], vb[bc.b_index(i)])).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(bc.out_shape().to_vec(), out, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, out, rg, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log with the argument clamped below at [`EPS`].
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(EPS).ln(), Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x.max(c), Op::ClampMin(a, c))
    }

    /// Softmax over the last axis, stabilised by max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let cols = last_axis(self.shape(a));
        check_finite(self.value(a), "softmax logits")?;
        let mut out = self.value(a).to_vec();
        out.chunks_mut(cols).for_each(softmax_in_place);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, out, rg, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let cols = last_axis(self.shape(a));
        check_finite(self.value(a), "log-softmax logits")?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(cols) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, out, rg, Op::LogSoftmax(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![s], rg, Op::Mean(a))
    }

    /// Sums over the last axis; a rank-1 input collapses to shape `[1]`.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let cols = last_axis(&shape);
        let out: Vec<f64> = self.value(a).chunks(cols).map(|r| r.iter().sum()).collect();
        let out_shape = if shape.len() > 1 { shape[..shape.len() - 1].to_vec() } else { vec![1] };
        let rg = self.rg(a);
        self.push(out_shape, out, rg, Op::SumLast(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() || shape.contains(&0) {
            return Err(TensorError::Dimension(format!("cannot reshape {:?} into {shape:?}", self.shape(a))));
        }
        let data = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), data, rg, Op::Reshape(a)))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.matrix_rows(parts)?;
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, total], out, rg, Op::ConcatCols(parts.to_vec())))
    }

    fn matrix_rows(&self, parts: &[Var]) -> Result<usize> {
        let first = parts.first().ok_or_else(|| TensorError::Dimension("concat of nothing".into()))?;
        let rows = self.shape(*first)[0];
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(TensorError::Dimension(format!("concat_cols expects [{rows}, _], got {s:?}")));
            }
        }
        Ok(rows)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(TensorError::Dimension(format!("slice_cols {start}..{} of {s:?}", start + len)));
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![rows, len], out, rg, Op::SliceCols { src: a, start }))
    }

    /// Stacks tensors along the first axis; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Dimension("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(TensorError::Dimension(format!("concat_rows trailing shape {:?} vs {tail:?}", &s[1..])));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, out, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if start + len > s[0] || len == 0 {
            return Err(TensorError::Dimension(format!("slice_rows {start}..{} of {s:?}", start + len)));
        }
        let stride: usize = s[1..].iter().product();
        let out = self.value(a)[start * stride..(start + len) * stride].to_vec();
        let mut shape = s;
        shape[0] = len;
        let rg = self.rg(a);
        Ok(self.push(shape, out, rg, Op::SliceRows { src: a, start }))
    }

    /// Draws a one-hot sample from each row of `classes` probabilities.
    /// The forward value is the sample; the backward pass treats the output
    /// as if it were the probabilities themselves.
    pub fn sample_straight_through<R: Rng + ?Sized>(&mut self, probs: Var, classes: usize, rng: &mut R) -> Result<Var> {
        let p = self.value(probs);
        if classes < 2 || !p.len().is_multiple_of(classes) {
            return Err(TensorError::Dimension(format!("{} probabilities do not split into rows of {classes}", p.len())));
        }
        check_finite(p, "categorical probabilities")?;
        let mut out = vec![0.0; p.len()];
        for (row, o) in p.chunks(classes).zip(out.chunks_mut(classes)) {
            o[sample_index(row, rng)] = 1.0;
        }
        let shape = self.shape(probs).to_vec();
        let rg = self.rg(probs);
        Ok(self.push(shape, out, rg, Op::StraightThrough(probs)))
    }

    /// 2-D convolution without padding. `input` is `[N, C_in, H, W]`,
    /// `weight` is `[C_out, C_in, k, k]`, `bias` is `[C_out]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize) -> Result<Var> {
        let geom = conv::Geometry::new(self.shape(input), self.shape(weight), stride)?;
        if self.shape(bias) != [geom.c_out] {
            return Err(TensorError::Dimension(format!("conv bias {:?} vs {} output channels", self.shape(bias), geom.c_out)));
        }
        let out = conv::forward(&geom, self.value(input), self.value(weight), self.value(bias));
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(geom.out_shape(), out, rg, Op::Conv2d { input, weight, bias, geom }))
    }

    /// Runs the chain rule from the scalar `loss` back to every leaf that
    /// requires a gradient. Adjoints from shared subexpressions are summed.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Dimension(format!("backward needs a scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let ga = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, self.value(*b), true, ga, 1.0);
                }
                if self.rg(*b) {
                    let gb = slot(grads, *b, k * n);
                    gemm(k, m, n, self.value(*a), true, g, false, gb, 1.0);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let bc = Broadcast::new(self.shape(*a), self.shape(*b)).expect("checked forward");
                if self.rg(*a) {
                    let ga = slot(grads, *a, self.value(*a).len());
                    for (j, gj) in g.iter().enumerate() {
                        ga[bc.a_index(j)] += gj;
                    }
                }
                if self.rg(*b) {
                    let gb = slot(grads, *b, self.value(*b).len());
                    for (j, gj) in g.iter().enumerate() {
                        gb[bc.b_index(j)] += sign * gj;
                    }
                }
            }
            Op::Mul(a, b) => {
                let bc = Broadcast::new(self.shape(*a), self.shape(*b)).expect("checked forward");
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = slot(grads, *a, va.len());
                    for (j, gj) in g.iter().enumerate() {
                        ga[bc.a_index(j)] += gj * vb[bc.b_index(j)];
                    }
                }
                if self.rg(*b) {
                    let gb = slot(grads, *b, vb.len());
                    for (j, gj) in g.iter().enumerate() {
                        gb[bc.b_index(j)] += gj * va[bc.a_index(j)];
                    }
                }
            }
            Op::Scale(a, c) => self.pointwise(grads, *a, g, |_, gj| gj * c),
            Op::Offset(a) | Op::Reshape(a) | Op::StraightThrough(a) => self.pointwise(grads, *a, g, |_, gj| gj),
            Op::Tanh(a) => self.pointwise_out(grads, *a, g, y, |yj, gj| gj * (1.0 - yj * yj)),
            Op::Sigmoid(a) => self.pointwise_out(grads, *a, g, y, |yj, gj| gj * yj * (1.0 - yj)),
            Op::Exp(a) => self.pointwise_out(grads, *a, g, y, |yj, gj| gj * yj),
            Op::Relu(a) => self.pointwise(grads, *a, g, |x, gj| if x > 0.0 { gj } else { 0.0 }),
            Op::Elu(a) => self.pointwise(grads, *a, g, |x, gj| if x > 0.0 { gj } else { gj * x.exp() }),
            Op::Log(a) => self.pointwise(grads, *a, g, |x, gj| if x > EPS { gj / x } else { 0.0 }),
            Op::Square(a) => self.pointwise(grads, *a, g, |x, gj| 2.0 * x * gj),
            Op::Softplus(a) => self.pointwise(grads, *a, g, |x, gj| gj * sigmoid(x)),
            Op::ClampMin(a, c) => self.pointwise(grads, *a, g, |x, gj| if x > *c { gj } else { 0.0 }),
            Op::Softmax(a) => {
                let cols = last_axis(&node.shape);
                let ga = slot(grads, *a, y.len());
                for ((yr, gr), out) in y.chunks(cols).zip(g.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..cols {
                        out[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let cols = last_axis(&node.shape);
                let ga = slot(grads, *a, y.len());
                for ((yr, gr), out) in y.chunks(cols).zip(g.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..cols {
                        out[j] += gr[j] - yr[j].exp() * total;
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                slot(grads, *a, n).iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let share = g[0] / n as f64;
                slot(grads, *a, n).iter_mut().for_each(|x| *x += share);
            }
            Op::SumLast(a) => {
                let n = self.value(*a).len();
                let cols = last_axis(self.shape(*a));
                for (r, chunk) in slot(grads, *a, n).chunks_mut(cols).enumerate() {
                    chunk.iter_mut().for_each(|x| *x += g[r]);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let (rows, w) = (self.shape(p)[0], self.shape(p)[1]);
                    if self.rg(p) {
                        let gp = slot(grads, p, rows * w);
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { src, start } => {
                let (rows, cols) = (self.shape(*src)[0], self.shape(*src)[1]);
                let len = node.shape[1];
                let gs = slot(grads, *src, rows * cols);
                for r in 0..rows {
                    gs[r * cols + start..r * cols + start + len]
                        .iter_mut()
                        .zip(&g[r * len..(r + 1) * len])
                        .for_each(|(d, s)| *d += s);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        slot(grads, p, n).iter_mut().zip(&g[offset..offset + n]).for_each(|(d, s)| *d += s);
                    }
                    offset += n;
                }
            }
            Op::SliceRows { src, start } => {
                let n = self.value(*src).len();
                let stride: usize = node.shape[1..].iter().product();
                let gs = slot(grads, *src, n);
                gs[start * stride..start * stride + g.len()].iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            Op::Conv2d { input, weight, bias, geom } => {
                let wi = self.value(*weight);
                let xi = self.value(*input);
                if self.rg(*bias) {
                    conv::backward_bias(geom, g, slot(grads, *bias, geom.c_out));
                }
                if self.rg(*weight) {
                    conv::backward_weight(geom, g, xi, slot(grads, *weight, wi.len()));
                }
                if self.rg(*input) {
                    conv::backward_input(geom, g, wi, slot(grads, *input, xi.len()));
                }
            }
        }
    }

    fn pointwise(&self, grads: &mut [Option<Vec<f64>>], a: Var, g: &[f64], f: impl Fn(f64, f64) -> f64) {
        let x = self.value(a);
        let ga = slot(grads, a, x.len());
        for ((d, &xj), &gj) in ga.iter_mut().zip(x).zip(g) {
            *d += f(xj, gj);
        }
    }

    fn pointwise_out(&self, grads: &mut [Option<Vec<f64>>], a: Var, g: &[f64], y: &[f64], f: impl Fn(f64, f64) -> f64) {
        let ga = slot(grads, a, y.len());
        for ((d, &yj), &gj) in ga.iter_mut().zip(y).zip(g) {
            *d += f(yj, gj);
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::Numeric(format!("non-finite {what}")))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

/// Inverse-CDF draw of an index from one probability row.
pub fn sample_index<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (j, &p) in row.iter().enumerate() {
        if p > 0.0 {
            last_positive = j;
        }
        acc += p;
        if u < acc {
            return j;
        }
    }
    last_positive
}
