//! Reverse-mode differentiation over a linear tape of tensor primitives.
//!
//! Every primitive appends one node holding its forward value and whatever it
//! needs for the vector-Jacobian product. Nodes only reference earlier nodes,
//! so a reverse sweep over the node list is a valid topological traversal.
//!
//! Broadcasting is limited to a one-element operand paired with a tensor.
//! Row or column broadcasts are composed from `matmul` against ones
//! (see [`Tape::broadcast_row`] and [`Tape::row_sums`]).

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    L2Norm(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Primitive kinds, used in error messages and for dispatching in tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    MatMul,
    Conv2d,
    MaxPool,
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Sqrt,
    Square,
    Sum,
    Mean,
    L2Norm,
    Concat,
    Slice,
    Reshape,
    SoftmaxCrossEntropy,
}

/// A recording of primitive applications.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar output with respect to every node of a tape.
#[derive(Debug, Clone)]
pub struct GradMap {
    tape: u32,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl GradMap {
    /// Gradient for `var`; nodes the output does not depend on get zeros.
    pub fn wrt(&self, var: Var) -> Tensor {
        assert_eq!(var.tape, self.tape, "variable from a different tape");
        match &self.grads[var.index] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.index]),
        }
    }

    /// Gradient for `var` if the output depends on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn elementwise_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() && b.is_scalar() {
        Ok(if a.rank() >= b.rank() { a.shape() } else { b.shape() }.to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else if b.is_scalar() {
        Ok(a.shape().to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn broadcast_binary(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = match (ad.len() == n, bd.len() == n) {
        (true, true) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        (true, false) => ad.iter().map(|&x| f(x, bd[0])).collect(),
        (false, true) => bd.iter().map(|&y| f(ad[0], y)).collect(),
        (false, false) => vec![f(ad[0], bd[0])],
    };
    Tensor::new(shape, data).expect("broadcast shape")
}

/// Reduce an upstream gradient onto an operand that may have been broadcast.
fn unbroadcast(grad: Tensor, target: &Tensor) -> Tensor {
    if grad.numel() == target.numel() {
        grad.reshape(target.shape().to_vec()).expect("same size")
    } else {
        Tensor::full(target.shape(), grad.sum())
    }
}

fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T b` for `a: [k, m]`, `b: [k, n]`.
fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a b^T` for `a: [m, k]`, `b: [n, k]`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar(v.index));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node { value, op });
        Var {
            index,
            tape: self.id,
        }
    }

    /// Forward value of a recorded variable.
    ///
    /// Panics if `v` belongs to another tape.
    pub fn value(&self, v: Var) -> &Tensor {
        self.check(v).expect("variable from a different tape");
        &self.nodes[v.index].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        self.check(v)?;
        Ok(&self.nodes[v.index].value)
    }

    /// Records an input. Inputs and constants are both leaves; gradients are
    /// reported for every leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    /// Applies `kind` to `inputs`. Primitives that need extra arguments
    /// (`concat`, `slice`, `reshape`, `softmax_cross_entropy`) are rejected
    /// here and must be called through their dedicated methods.
    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "{kind:?} takes {n} inputs, got {}",
                    inputs.len()
                )));
            }
            Ok(())
        };
        match kind {
            Primitive::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            Primitive::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            Primitive::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            Primitive::Div => arity(2).and_then(|_| self.div(inputs[0], inputs[1])),
            Primitive::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            Primitive::Conv2d => arity(3).and_then(|_| self.conv2d(inputs[0], inputs[1], inputs[2])),
            Primitive::Neg => arity(1).and_then(|_| self.neg(inputs[0])),
            Primitive::MaxPool => arity(1).and_then(|_| self.maxpool2(inputs[0])),
            Primitive::Tanh => arity(1).and_then(|_| self.tanh(inputs[0])),
            Primitive::Sigmoid => arity(1).and_then(|_| self.sigmoid(inputs[0])),
            Primitive::Relu => arity(1).and_then(|_| self.relu(inputs[0])),
            Primitive::Exp => arity(1).and_then(|_| self.exp(inputs[0])),
            Primitive::Log => arity(1).and_then(|_| self.log(inputs[0])),
            Primitive::Sqrt => arity(1).and_then(|_| self.sqrt(inputs[0])),
            Primitive::Square => arity(1).and_then(|_| self.square(inputs[0])),
            Primitive::Sum => arity(1).and_then(|_| self.sum(inputs[0])),
            Primitive::Mean => arity(1).and_then(|_| self.mean(inputs[0])),
            Primitive::L2Norm => arity(1).and_then(|_| self.l2_norm(inputs[0])),
            Primitive::Concat | Primitive::Slice | Primitive::Reshape | Primitive::SoftmaxCrossEntropy => {
                Err(Error::InvalidArgument(format!("{kind:?} needs its dedicated method")))
            }
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var) -> Op,
    ) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        let shape = elementwise_shape(op, ta, tb)?;
        let value = broadcast_binary(ta, tb, shape, f);
        Ok(self.push(value, make(a, b)))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, make: impl Fn(Var) -> Op) -> Result<Var> {
        self.check(a)?;
        let value = self.nodes[a.index].value.map(f);
        Ok(self.push(value, make(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| -x, Op::Neg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.index].value, &self.nodes[b.index].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Valid (unpadded) stride-1 convolution.
    ///
    /// `input: [N, C, H, W]`, `kernel: [O, C, K, K]`, `bias: [O]`
    /// gives `[N, O, H-K+1, W-K+1]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        self.check(input)?;
        self.check(kernel)?;
        self.check(bias)?;
        let x = &self.nodes[input.index].value;
        let w = &self.nodes[kernel.index].value;
        let b = &self.nodes[bias.index].value;
        let bad = |lhs: &Tensor, rhs: &Tensor| Error::ShapeMismatch {
            op: "conv2d",
            lhs: lhs.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        };
        if x.rank() != 4 || w.rank() != 4 || w.shape()[1] != x.shape()[1] || w.shape()[2] != w.shape()[3] {
            return Err(bad(x, w));
        }
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, k) = (w.shape()[0], w.shape()[2]);
        if k > h || k > wd {
            return Err(bad(x, w));
        }
        if b.shape() != [o] {
            return Err(bad(w, b));
        }
        let (oh, ow) = (h - k + 1, wd - k + 1);
        let (xd, wdat, bd) = (x.data(), w.data(), b.data());
        let mut out = vec![0.0; n * o * oh * ow];
        for ni in 0..n {
            for oi in 0..o {
                let plane = &mut out[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
                plane.iter_mut().for_each(|v| *v = bd[oi]);
                for ci in 0..c {
                    let xin = &xd[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                    let ker = &wdat[(oi * c + ci) * k * k..(oi * c + ci + 1) * k * k];
                    for ki in 0..k {
                        for kj in 0..k {
                            let kv = ker[ki * k + kj];
                            for y in 0..oh {
                                let xrow = &xin[(y + ki) * wd + kj..(y + ki) * wd + kj + ow];
                                let orow = &mut plane[y * ow..(y + 1) * ow];
                                for (ov, &xv) in orow.iter_mut().zip(xrow) {
                                    *ov += kv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, o, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, bias }))
    }

    /// 2x2 max pooling with stride 2; trailing odd rows/columns are dropped.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let x = &self.nodes[input.index].value;
        if x.rank() != 4 || x.shape()[2] < 2 || x.shape()[3] < 2 {
            return Err(Error::ShapeMismatch {
                op: "maxpool",
                lhs: x.shape().to_vec(),
                rhs: vec![2, 2],
            });
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = x.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if let Some(bad) = self.nodes[a.index].value.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        self.unary(a, f64::ln, Op::Log)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if let Some(bad) = self.nodes[a.index].value.data().iter().find(|&&x| x < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        self.unary(a, f64::sqrt, Op::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.nodes[a.index].value.sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = &self.nodes[a.index].value;
        let s = t.sum() / t.numel() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(a)))
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.nodes[a.index].value.l2_norm();
        Ok(self.push(Tensor::scalar(s), Op::L2Norm(a)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        for &v in inputs {
            self.check(v)?;
        }
        let base = self.nodes[first.index].value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidArgument(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.nodes[v.index].value.shape();
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_blocks(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = &self.nodes[v.index].value;
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(input)?;
        let t = &self.nodes[input.index].value;
        if axis >= t.rank() || start + len > t.shape()[axis] {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: t.shape().to_vec(),
                rhs: vec![axis, start, len],
            });
        }
        let (outer, size, inner) = axis_blocks(t.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * size + start) * inner;
            data.extend_from_slice(&t.data()[from..from + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Slice { input, axis, start }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        self.check(input)?;
        let value = self.nodes[input.index].value.clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(input)))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let t = &self.nodes[logits.index].value;
        if t.rank() != 2 || t.shape()[0] != labels.len() || labels.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (b, k) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &t.data()[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / z;
            }
            loss += z.ln() + max - row[label];
        }
        let probs = Tensor::new(vec![b, k], probs)?;
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // -- compositions ------------------------------------------------------

    /// `a * c` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    /// `a + c` for a constant `c`.
    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.add(a, s)
    }

    /// Repeats a `[1, n]` row (or `[n]` vector) into `[rows, n]`.
    pub fn broadcast_row(&mut self, row: Var, rows: usize) -> Result<Var> {
        let n = self.try_value(row)?.numel();
        let row = self.reshape(row, &[1, n])?;
        let ones = self.leaf(Tensor::ones(&[rows, 1]));
        self.matmul(ones, row)
    }

    /// Repeats a `[rows, 1]` column into `[rows, n]`.
    pub fn broadcast_col(&mut self, col: Var, n: usize) -> Result<Var> {
        let ones = self.leaf(Tensor::ones(&[1, n]));
        self.matmul(col, ones)
    }

    /// Row sums of a `[rows, n]` matrix as `[rows, 1]`.
    pub fn row_sums(&mut self, x: Var) -> Result<Var> {
        let shape = self.try_value(x)?.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "row_sums",
                lhs: shape,
                rhs: vec![0, 0],
            });
        }
        let ones = self.leaf(Tensor::ones(&[shape[1], 1]));
        self.matmul(x, ones)
    }

    /// `x W + b` for `x: [rows, in]`, `W: [in, out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let rows = self.try_value(x)?.shape().first().copied().unwrap_or(1);
        let xw = self.matmul(x, w)?;
        let bb = self.broadcast_row(b, rows)?;
        self.add(xw, bb)
    }

    /// Row-wise softmax of a `[rows, k]` matrix.
    pub fn softmax_rows(&mut self, logits: Var) -> Result<Var> {
        let t = self.try_value(logits)?;
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        let (rows, k) = (t.shape()[0], t.shape()[1]);
        // softmax is shift invariant, so the row max enters as a constant
        let maxes: Vec<f64> = t
            .data()
            .chunks(k)
            .map(|r| r.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let shift = self.leaf(Tensor::new(vec![rows, 1], maxes)?);
        let shift = self.broadcast_col(shift, k)?;
        let centered = self.sub(logits, shift)?;
        let e = self.exp(centered)?;
        let z = self.row_sums(e)?;
        let z = self.broadcast_col(z, k)?;
        self.div(e, z)
    }

    // -- reverse sweep -----------------------------------------------------

    /// Gradients of the scalar `output` with respect to every recorded node.
    pub fn backward(&self, output: Var) -> Result<GradMap> {
        self.check(output)?;
        let out = &self.nodes[output.index].value;
        if out.numel() != 1 {
            return Err(Error::NonScalarOutput(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.index + 1];
        grads[output.index] = Some(Tensor::full(out.shape(), 1.0));

        for idx in (0..=output.index).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }
        grads.resize(self.nodes.len(), None);
        Ok(GradMap {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, up: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.index].value;
        let mut acc = |v: Var, g: Tensor| {
            let slot = &mut grads[v.index];
            match slot {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += x;
                    }
                }
                None => *slot = Some(g),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, unbroadcast(up.clone(), val(*a)));
                acc(*b, unbroadcast(up.clone(), val(*b)));
            }
            Op::Sub(a, b) => {
                acc(*a, unbroadcast(up.clone(), val(*a)));
                acc(*b, unbroadcast(up.map(|x| -x), val(*b)));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = broadcast_binary(up, tb, y.shape().to_vec(), |u, x| u * x);
                let gb = broadcast_binary(up, ta, y.shape().to_vec(), |u, x| u * x);
                acc(*a, unbroadcast(ga, ta));
                acc(*b, unbroadcast(gb, tb));
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = broadcast_binary(up, tb, y.shape().to_vec(), |u, d| u / d);
                // d(a/b)/db = -y / b
                let yb = broadcast_binary(y, tb, y.shape().to_vec(), |q, d| -q / d);
                let gb = broadcast_binary(up, &yb, y.shape().to_vec(), |u, x| u * x);
                acc(*a, unbroadcast(ga, ta));
                acc(*b, unbroadcast(gb, tb));
            }
            Op::Neg(a) => acc(*a, up.map(|x| -x)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let ga = matmul_nt(up.data(), tb.data(), m, n, k);
                let gb = matmul_tn(ta.data(), up.data(), m, k, n);
                acc(*a, Tensor::new(vec![m, k], ga).expect("shape"));
                acc(*b, Tensor::new(vec![k, n], gb).expect("shape"));
            }
            Op::Conv2d { input, kernel, bias } => {
                let (x, w) = (val(*input), val(*kernel));
                let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let (o, k) = (w.shape()[0], w.shape()[2]);
                let (oh, ow) = (h - k + 1, wd - k + 1);
                let (xd, wdat, ud) = (x.data(), w.data(), up.data());
                let mut gx = vec![0.0; x.numel()];
                let mut gw = vec![0.0; w.numel()];
                let mut gb = vec![0.0; o];
                for ni in 0..n {
                    for oi in 0..o {
                        let uplane = &ud[(ni * o + oi) * oh * ow..(ni * o + oi + 1) * oh * ow];
                        gb[oi] += uplane.iter().sum::<f64>();
                        for ci in 0..c {
                            let xoff = (ni * c + ci) * h * wd;
                            let woff = (oi * c + ci) * k * k;
                            for ki in 0..k {
                                for kj in 0..k {
                                    let kv = wdat[woff + ki * k + kj];
                                    let mut gk = 0.0;
                                    for yy in 0..oh {
                                        let urow = &uplane[yy * ow..(yy + 1) * ow];
                                        let start = xoff + (yy + ki) * wd + kj;
                                        let xrow = &xd[start..start + ow];
                                        let gxrow = &mut gx[start..start + ow];
                                        for ((&u, &xv), gxv) in urow.iter().zip(xrow).zip(gxrow.iter_mut()) {
                                            gk += u * xv;
                                            *gxv += u * kv;
                                        }
                                    }
                                    gw[woff + ki * k + kj] += gk;
                                }
                            }
                        }
                    }
                }
                acc(*input, Tensor::new(x.shape().to_vec(), gx).expect("shape"));
                acc(*kernel, Tensor::new(w.shape().to_vec(), gw).expect("shape"));
                acc(*bias, Tensor::vector(gb));
            }
            Op::MaxPool { input, argmax } => {
                let x = val(*input);
                let mut g = vec![0.0; x.numel()];
                for (&src, &u) in argmax.iter().zip(up.data()) {
                    g[src] += u;
                }
                acc(*input, Tensor::new(x.shape().to_vec(), g).expect("shape"));
            }
            Op::Tanh(a) => acc(*a, up.zip_map(y, |u, t| u * (1.0 - t * t)).expect("shape")),
            Op::Sigmoid(a) => acc(*a, up.zip_map(y, |u, s| u * s * (1.0 - s)).expect("shape")),
            Op::Relu(a) => acc(*a, up.zip_map(val(*a), |u, x| if x > 0.0 { u } else { 0.0 }).expect("shape")),
            Op::Exp(a) => acc(*a, up.zip_map(y, |u, e| u * e).expect("shape")),
            Op::Log(a) => acc(*a, up.zip_map(val(*a), |u, x| u / x).expect("shape")),
            // the derivative at exactly zero is taken as 0 rather than infinity
            Op::Sqrt(a) => acc(*a, up.zip_map(y, |u, s| if s > 0.0 { u * 0.5 / s } else { 0.0 }).expect("shape")),
            Op::Square(a) => acc(*a, up.zip_map(val(*a), |u, x| 2.0 * u * x).expect("shape")),
            Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), up.item())),
            Op::Mean(a) => {
                let t = val(*a);
                acc(*a, Tensor::full(t.shape(), up.item() / t.numel() as f64));
            }
            Op::L2Norm(a) => {
                let norm = y.item();
                let g = if norm > 0.0 {
                    val(*a).map(|x| up.item() * x / norm)
                } else {
                    Tensor::zeros(val(*a).shape())
                };
                acc(*a, g);
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_blocks(y.shape(), *axis);
                let mut offset = 0;
                let total = y.shape()[*axis] * inner;
                for &v in inputs {
                    let t = val(v);
                    let len = t.shape()[*axis] * inner;
                    let mut g = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let from = o * total + offset;
                        g.extend_from_slice(&up.data()[from..from + len]);
                    }
                    offset += len;
                    acc(v, Tensor::new(t.shape().to_vec(), g).expect("shape"));
                }
            }
            Op::Slice { input, axis, start } => {
                let t = val(*input);
                let (outer, size, inner) = axis_blocks(t.shape(), *axis);
                let len = y.shape()[*axis];
                let mut g = vec![0.0; t.numel()];
                for o in 0..outer {
                    let to = (o * size + start) * inner;
                    g[to..to + len * inner].copy_from_slice(&up.data()[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*input, Tensor::new(t.shape().to_vec(), g).expect("shape"));
            }
            Op::Reshape(a) => acc(*a, up.clone().reshape(val(*a).shape().to_vec()).expect("shape")),
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let k = probs.shape()[1];
                let scale = up.item() / b as f64;
                let mut g = probs.data().to_vec();
                for (i, &l) in labels.iter().enumerate() {
                    g[i * k + l] -= 1.0;
                }
                g.iter_mut().for_each(|x| *x *= scale);
                acc(*logits, Tensor::new(vec![b, k], g).expect("shape"));
            }
        }
    }
}
