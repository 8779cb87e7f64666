//! Reverse-mode differentiation over a Wengert tape.
//!
//! Nodes are appended in creation order, which is already a topological
//! order of the graph; `backward` walks them in reverse exactly once.
//! Gradients of repeated `backward` calls accumulate until `zero_grad`.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{Real, Tensor, LOG_EPS};
use crate::par::Exec;
use crate::{Error, Result};

/// Operation tag of a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    Relu,
    Sigmoid,
    Softmax,
    Log2Softmax,
    Log2,
    Sum,
    Mean,
    SumAll,
    MeanAll,
    L2Norm,
    L2NormAxis,
    Conv2d,
    Conv1dSame,
    GlobalAvgPool,
    Concat,
    Transpose,
    Reshape,
    IndexSelect,
}

enum Op<T> {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Scale(T),
    AddScalar,
    Relu,
    Sigmoid,
    Softmax(usize),
    Log2Softmax(usize),
    Log2,
    Sum(usize),
    Mean(usize),
    SumAll,
    MeanAll,
    L2Norm,
    L2NormAxis(usize),
    Conv2d {
        geom: ConvGeom,
        out_channels: usize,
        cols: Vec<T>,
    },
    Conv1dSame,
    GlobalAvgPool,
    Concat(usize),
    Transpose,
    Reshape,
    IndexSelect {
        axis: usize,
        indices: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul => OpKind::MatMul,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Div => OpKind::Div,
            Op::Scale(_) => OpKind::Scale,
            Op::AddScalar => OpKind::AddScalar,
            Op::Relu => OpKind::Relu,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Log2Softmax(_) => OpKind::Log2Softmax,
            Op::Log2 => OpKind::Log2,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::SumAll => OpKind::SumAll,
            Op::MeanAll => OpKind::MeanAll,
            Op::L2Norm => OpKind::L2Norm,
            Op::L2NormAxis(_) => OpKind::L2NormAxis,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Conv1dSame => OpKind::Conv1dSame,
            Op::GlobalAvgPool => OpKind::GlobalAvgPool,
            Op::Concat(_) => OpKind::Concat,
            Op::Transpose => OpKind::Transpose,
            Op::Reshape => OpKind::Reshape,
            Op::IndexSelect { .. } => OpKind::IndexSelect,
        }
    }
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<usize>,
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Records operations for one forward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    clamped: Cell<usize>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            clamped: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of `log2` arguments clamped up to `LOG_EPS` so far.
    pub fn clamp_count(&self) -> usize {
        self.clamped.get()
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(Op::Leaf, Vec::new(), value, requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn kind(&self, var: Var<'_, T>) -> OpKind {
        self.nodes.borrow()[var.id].op.kind()
    }

    /// Parent node ids of `var`.
    pub fn inputs(&self, var: Var<'_, T>) -> Vec<usize> {
        self.nodes.borrow()[var.id].inputs.clone()
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    fn push(&self, op: Op<T>, inputs: Vec<usize>, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        debug_assert!(inputs.iter().all(|&i| i < id));
        nodes.push(Node {
            op,
            inputs,
            value: Rc::new(value),
            requires_grad,
            grad: None,
        });
        Var { tape: self, id }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagates from a scalar `loss`, accumulating into every
    /// `requires_grad` node reachable from it.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let mut local: Vec<Option<Tensor<T>>> = {
            let nodes = self.nodes.borrow();
            let node = &nodes[loss.id];
            if node.value.numel() != 1 {
                return Err(Error::NonScalarLoss(node.value.shape().to_vec()));
            }
            let mut local = Vec::with_capacity(loss.id + 1);
            local.resize_with(loss.id + 1, || None);
            if node.requires_grad {
                local[loss.id] = Some(Tensor::full(node.value.shape().to_vec(), T::one()));
            }
            local
        };
        {
            let nodes = self.nodes.borrow();
            for id in (0..=loss.id).rev() {
                let node = &nodes[id];
                if !node.requires_grad || matches!(node.op, Op::Leaf) {
                    continue;
                }
                let Some(g) = local[id].take() else { continue };
                let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
                let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
                let grads = backward_op(&node.op, &inputs, &node.value, &g, &needs);
                for ((&inp, gi), need) in node.inputs.iter().zip(grads).zip(needs) {
                    if !need {
                        continue;
                    }
                    let Some(gi) = gi else { continue };
                    match &mut local[inp] {
                        Some(acc) => acc.add_assign(&gi),
                        slot @ None => *slot = Some(gi),
                    }
                }
                // keep the upstream grad so intermediate nodes can be inspected
                local[id] = Some(g);
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in local.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> Result<T> {
        self.value().item()
    }

    /// A gradient-free copy of this node's value.
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.constant(self.value().as_ref().clone())
    }

    fn unary(&self, op: Op<T>, out: Tensor<T>) -> Var<'t, T> {
        let rg = self.requires_grad();
        self.tape.push(op, vec![self.id], out, rg)
    }

    fn binary(&self, other: &Var<'t, T>, op: Op<T>, out: Tensor<T>) -> Var<'t, T> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(op, vec![self.id, other.id], out, rg)
    }

    fn zip(&self, other: &Var<'t, T>, name: &'static str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let out_shape =
            kernels::broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::shape(name, a.shape(), b.shape()))?;
        let data = kernels::broadcast_zip(a.data(), a.shape(), b.data(), b.shape(), &out_shape, f);
        Ok(self.binary(other, op, Tensor::from_parts(out_shape, data)))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip(other, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip(other, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip(other, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn div(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip(other, "div", Op::Div, |x, y| x / y)
    }

    pub fn scale(&self, s: T) -> Var<'t, T> {
        let out = self.value().map(|v| v * s);
        self.unary(Op::Scale(s), out)
    }

    pub fn add_scalar(&self, s: T) -> Var<'t, T> {
        let out = self.value().map(|v| v + s);
        self.unary(Op::AddScalar, out)
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(a.data(), b.data(), m, k, n);
        Ok(self.binary(other, Op::MatMul, Tensor::from_parts(vec![m, n], data)))
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.ndim() != 2 {
            return Err(Error::invalid(
                "transpose",
                format!("needs a matrix, got shape {:?}", a.shape()),
            ));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let out = Tensor::from_parts(vec![c, r], kernels::transpose(a.data(), r, c));
        Ok(self.unary(Op::Transpose, out))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let a = self.value();
        if shape.iter().product::<usize>() != a.numel() {
            return Err(Error::shape("reshape", a.shape(), shape));
        }
        let out = Tensor::from_parts(shape.to_vec(), a.data().to_vec());
        Ok(self.unary(Op::Reshape, out))
    }

    pub fn relu(&self) -> Var<'t, T> {
        let out = self.value().map(|v| v.max(T::zero()));
        self.unary(Op::Relu, out)
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        let out = self.value().map(|v| T::one() / (T::one() + (-v).exp()));
        self.unary(Op::Sigmoid, out)
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Rc<Tensor<T>>> {
        let a = self.value();
        if axis >= a.ndim() {
            return Err(Error::invalid(
                op,
                format!("axis {axis} out of range for shape {:?}", a.shape()),
            ));
        }
        Ok(a)
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let a = self.check_axis("softmax", axis)?;
        let data = kernels::softmax(a.data(), a.shape(), axis);
        Ok(self.unary(Op::Softmax(axis), Tensor::from_parts(a.shape().to_vec(), data)))
    }

    /// `log2(softmax(x))` along `axis`, computed without forming the softmax,
    /// so it stays finite and differentiable for saturated rows.
    pub fn log2_softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let a = self.check_axis("log2_softmax", axis)?;
        let data = kernels::log2_softmax(a.data(), a.shape(), axis);
        Ok(self.unary(Op::Log2Softmax(axis), Tensor::from_parts(a.shape().to_vec(), data)))
    }

    /// `log2(max(x, LOG_EPS))`; clamped entries are counted on the tape.
    pub fn log2(&self) -> Var<'t, T> {
        let eps = T::of(LOG_EPS);
        let a = self.value();
        let mut clamped = 0;
        let out = a.map(|v| if v > eps { v.log2() } else { eps.log2() });
        for &v in a.data() {
            if !(v > eps) {
                clamped += 1;
            }
        }
        self.tape.clamped.set(self.tape.clamped.get() + clamped);
        self.unary(Op::Log2, out)
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut s = shape.to_vec();
        s.remove(axis);
        s
    }

    pub fn sum(&self, axis: usize) -> Result<Var<'t, T>> {
        let a = self.check_axis("sum", axis)?;
        let data = kernels::sum_axis(a.data(), a.shape(), axis);
        Ok(self.unary(
            Op::Sum(axis),
            Tensor::from_parts(Self::reduced_shape(a.shape(), axis), data),
        ))
    }

    pub fn mean(&self, axis: usize) -> Result<Var<'t, T>> {
        let a = self.check_axis("mean", axis)?;
        let len = T::of(a.shape()[axis] as f64);
        let data = kernels::sum_axis(a.data(), a.shape(), axis)
            .into_iter()
            .map(|v| v / len)
            .collect();
        Ok(self.unary(
            Op::Mean(axis),
            Tensor::from_parts(Self::reduced_shape(a.shape(), axis), data),
        ))
    }

    pub fn sum_all(&self) -> Var<'t, T> {
        let s = self.value().data().iter().copied().sum();
        self.unary(Op::SumAll, Tensor::scalar(s))
    }

    pub fn mean_all(&self) -> Var<'t, T> {
        let a = self.value();
        let s: T = a.data().iter().copied().sum();
        self.unary(Op::MeanAll, Tensor::scalar(s / T::of(a.numel() as f64)))
    }

    /// Euclidean norm over every element.
    pub fn l2_norm(&self) -> Var<'t, T> {
        let s: T = self.value().data().iter().map(|&v| v * v).sum();
        self.unary(Op::L2Norm, Tensor::scalar(s.sqrt()))
    }

    /// Euclidean norm along one axis.
    pub fn l2_norm_axis(&self, axis: usize) -> Result<Var<'t, T>> {
        let a = self.check_axis("l2_norm_axis", axis)?;
        let sq: Vec<T> = a.data().iter().map(|&v| v * v).collect();
        let data = kernels::sum_axis(&sq, a.shape(), axis)
            .into_iter()
            .map(|v| v.sqrt())
            .collect();
        Ok(self.unary(
            Op::L2NormAxis(axis),
            Tensor::from_parts(Self::reduced_shape(a.shape(), axis), data),
        ))
    }

    /// Frobenius norm of `self - other`; shapes must match exactly.
    pub fn frobenius_norm_diff(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape("frobenius_norm_diff", a.shape(), b.shape()));
        }
        Ok(self.sub(other)?.l2_norm())
    }

    /// 2-D convolution, `self: [n,c,h,w]`, `kernel: [o,c,kh,kw]`.
    pub fn conv2d(&self, kernel: &Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        let (x, k) = (self.value(), kernel.value());
        let (sx, sk) = (x.shape(), k.shape());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(Error::shape("conv2d", sx, sk));
        }
        if stride == 0 || sx[2] + 2 * pad < sk[2] || sx[3] + 2 * pad < sk[3] {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {sk:?} with stride {stride} pad {pad} does not fit input {sx:?}"),
            ));
        }
        let geom = ConvGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            kh: sk[2],
            kw: sk[3],
            stride,
            pad,
        };
        let o = sk[0];
        let exec = Exec::for_work(geom.positions() * geom.patch_len() * o);
        let (y, cols) = kernels::conv2d_forward(exec, x.data(), k.data(), o, &geom);
        let out = Tensor::from_parts(vec![geom.n, o, geom.out_h(), geom.out_w()], y);
        let keep = self.requires_grad() || kernel.requires_grad();
        let op = Op::Conv2d {
            geom,
            out_channels: o,
            cols: if keep { cols } else { Vec::new() },
        };
        Ok(self.binary(kernel, op, out))
    }

    /// Zero-padded 1-D convolution along the last axis of `[m, c]` with an
    /// odd-length kernel `[k]`, output length equal to input length.
    pub fn conv1d_same(&self, kernel: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, w) = (self.value(), kernel.value());
        let (sx, sw) = (x.shape(), w.shape());
        if sx.len() != 2 || sw.len() != 1 {
            return Err(Error::shape("conv1d_same", sx, sw));
        }
        let k = sw[0];
        if k % 2 == 0 {
            return Err(Error::invalid("conv1d_same", format!("kernel length {k} must be odd")));
        }
        let (m, c) = (sx[0], sx[1]);
        let half = (k / 2) as isize;
        let mut out = vec![T::zero(); m * c];
        for r in 0..m {
            for ch in 0..c {
                let mut acc = T::zero();
                for j in 0..k {
                    let src = ch as isize + j as isize - half;
                    if src >= 0 && (src as usize) < c {
                        acc += w.data()[j] * x.data()[r * c + src as usize];
                    }
                }
                out[r * c + ch] = acc;
            }
        }
        Ok(self.binary(kernel, Op::Conv1dSame, Tensor::from_parts(vec![m, c], out)))
    }

    /// Spatial mean of `[n, c, h, w]` giving `[n, c]`.
    pub fn global_avg_pool(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::invalid("global_avg_pool", format!("needs [n,c,h,w], got {s:?}")));
        }
        let hw = s[2] * s[3];
        let inv = T::of(1.0 / hw as f64);
        let data = x
            .data()
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.unary(Op::GlobalAvgPool, Tensor::from_parts(vec![s[0], s[1]], data)))
    }

    /// Concatenates `parts` along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let tape = first.tape;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        for v in &values[1..] {
            let s = v.shape();
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &base, s));
            }
        }
        let mut shape = base.clone();
        shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(Op::Concat(axis), ids, Tensor::from_parts(shape, data), rg))
    }

    /// Gathers `indices` along `axis` (indices may repeat).
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Var<'t, T>> {
        let a = self.check_axis("index_select", axis)?;
        let (outer, len, inner) = kernels::axis_split(a.shape(), axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::invalid(
                "index_select",
                format!("index {bad} out of range {len}"),
            ));
        }
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = (o * len + i) * inner;
                data.extend_from_slice(&a.data()[start..start + inner]);
            }
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = indices.len();
        let op = Op::IndexSelect {
            axis,
            indices: indices.to_vec(),
        };
        Ok(self.unary(op, Tensor::from_parts(shape, data)))
    }
}

fn backward_op<T: Real>(
    op: &Op<T>,
    inputs: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &Tensor<T>,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let like = |t: &Tensor<T>, data: Vec<T>| Some(Tensor::from_parts(t.shape().to_vec(), data));
    let reduce = |t: &Tensor<T>, data: &[T]| like(t, kernels::reduce_to_shape(data, out.shape(), t.shape()));
    match op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![reduce(inputs[0], g.data()), reduce(inputs[1], g.data())],
        Op::Sub => {
            let neg: Vec<T> = g.data().iter().map(|&v| -v).collect();
            vec![reduce(inputs[0], g.data()), reduce(inputs[1], &neg)]
        }
        Op::Mul | Op::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let os = out.shape();
            let is_div = matches!(op, Op::Div);
            let ga = needs[0].then(|| {
                let d = if is_div {
                    kernels::broadcast_zip(g.data(), os, b.data(), b.shape(), os, |x, y| x / y)
                } else {
                    kernels::broadcast_zip(g.data(), os, b.data(), b.shape(), os, |x, y| x * y)
                };
                kernels::reduce_to_shape(&d, os, a.shape())
            });
            let gb = needs[1].then(|| {
                let d = if is_div {
                    // d(a/b)/db = -y / b
                    let gy: Vec<T> = g.data().iter().zip(out.data()).map(|(&x, &y)| -x * y).collect();
                    kernels::broadcast_zip(&gy, os, b.data(), b.shape(), os, |x, y| x / y)
                } else {
                    kernels::broadcast_zip(g.data(), os, a.data(), a.shape(), os, |x, y| x * y)
                };
                kernels::reduce_to_shape(&d, os, b.shape())
            });
            vec![ga.and_then(|d| like(a, d)), gb.and_then(|d| like(b, d))]
        }
        Op::Scale(s) => vec![like(inputs[0], g.data().iter().map(|&v| v * *s).collect())],
        Op::AddScalar | Op::Reshape => vec![like(inputs[0], g.data().to_vec())],
        Op::Relu => {
            let d = g
                .data()
                .iter()
                .zip(inputs[0].data())
                .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                .collect();
            vec![like(inputs[0], d)]
        }
        Op::Sigmoid => {
            let d = g
                .data()
                .iter()
                .zip(out.data())
                .map(|(&gv, &y)| gv * y * (T::one() - y))
                .collect();
            vec![like(inputs[0], d)]
        }
        Op::Softmax(axis) => {
            let (outer, len, inner) = kernels::axis_split(out.shape(), *axis);
            let (y, gd) = (out.data(), g.data());
            let mut d = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let mut dot = T::zero();
                    for j in 0..len {
                        dot += gd[at(j)] * y[at(j)];
                    }
                    for j in 0..len {
                        d[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                    }
                }
            }
            vec![like(inputs[0], d)]
        }
        Op::Log2Softmax(axis) => {
            let (outer, len, inner) = kernels::axis_split(out.shape(), *axis);
            let (y, gd) = (out.data(), g.data());
            let inv_ln2 = T::one() / T::of(std::f64::consts::LN_2);
            let mut d = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let mut total = T::zero();
                    for j in 0..len {
                        total += gd[at(j)];
                    }
                    for j in 0..len {
                        d[at(j)] = (gd[at(j)] - y[at(j)].exp2() * total) * inv_ln2;
                    }
                }
            }
            vec![like(inputs[0], d)]
        }
        Op::Log2 => {
            let eps = T::of(LOG_EPS);
            let ln2 = T::of(std::f64::consts::LN_2);
            let d = g
                .data()
                .iter()
                .zip(inputs[0].data())
                .map(|(&gv, &x)| if x > eps { gv / (x * ln2) } else { T::zero() })
                .collect();
            vec![like(inputs[0], d)]
        }
        Op::Sum(axis) => vec![like(
            inputs[0],
            kernels::expand_axis(g.data(), inputs[0].shape(), *axis, T::one()),
        )],
        Op::Mean(axis) => {
            let s = T::one() / T::of(inputs[0].shape()[*axis] as f64);
            vec![like(
                inputs[0],
                kernels::expand_axis(g.data(), inputs[0].shape(), *axis, s),
            )]
        }
        Op::SumAll => vec![Some(Tensor::full(inputs[0].shape().to_vec(), g.data()[0]))],
        Op::MeanAll => {
            let v = g.data()[0] / T::of(inputs[0].numel() as f64);
            vec![Some(Tensor::full(inputs[0].shape().to_vec(), v))]
        }
        Op::L2Norm => {
            let norm = out.data()[0];
            let gv = g.data()[0];
            let d = inputs[0]
                .data()
                .iter()
                .map(|&x| if norm > T::zero() { gv * x / norm } else { T::zero() })
                .collect();
            vec![like(inputs[0], d)]
        }
        Op::L2NormAxis(axis) => {
            let x = inputs[0];
            let (outer, len, inner) = kernels::axis_split(x.shape(), *axis);
            let mut d = vec![T::zero(); x.numel()];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        let r = o * inner + i;
                        let n = out.data()[r];
                        let at = (o * len + j) * inner + i;
                        if n > T::zero() {
                            d[at] = g.data()[r] * x.data()[at] / n;
                        }
                    }
                }
            }
            vec![like(x, d)]
        }
        Op::Conv2d {
            geom,
            out_channels,
            cols,
        } => {
            let o = *out_channels;
            let hw = geom.out_h() * geom.out_w();
            let (pos, plen) = (geom.positions(), geom.patch_len());
            let exec = Exec::for_work(pos * plen * o);
            let gpos = kernels::nchw_to_positions(g.data(), geom.n, o, hw);
            let gx = needs[0].then(|| {
                let dcols = kernels::matmul_with(exec, &gpos, inputs[1].data(), pos, o, plen);
                kernels::col2im(exec, &dcols, geom)
            });
            let gk = needs[1].then(|| {
                let gt = kernels::transpose(&gpos, pos, o);
                kernels::matmul_with(exec, &gt, cols, o, pos, plen)
            });
            vec![gx.and_then(|d| like(inputs[0], d)), gk.and_then(|d| like(inputs[1], d))]
        }
        Op::Conv1dSame => {
            let (x, w) = (inputs[0], inputs[1]);
            let (m, c, k) = (x.shape()[0], x.shape()[1], w.numel());
            let half = (k / 2) as isize;
            let mut gx = vec![T::zero(); m * c];
            let mut gw = vec![T::zero(); k];
            for r in 0..m {
                for ch in 0..c {
                    let gv = g.data()[r * c + ch];
                    for j in 0..k {
                        let src = ch as isize + j as isize - half;
                        if src >= 0 && (src as usize) < c {
                            let s = r * c + src as usize;
                            gx[s] += gv * w.data()[j];
                            gw[j] += gv * x.data()[s];
                        }
                    }
                }
            }
            vec![like(x, gx), like(w, gw)]
        }
        Op::GlobalAvgPool => {
            let s = inputs[0].shape();
            let hw = s[2] * s[3];
            let inv = T::of(1.0 / hw as f64);
            let d = g
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat(v * inv).take(hw))
                .collect();
            vec![like(inputs[0], d)]
        }
        Op::Concat(axis) => {
            let outer: usize = out.shape()[..*axis].iter().product();
            let inner: usize = out.shape()[axis + 1..].iter().product();
            let mut parts: Vec<Vec<T>> = inputs.iter().map(|t| Vec::with_capacity(t.numel())).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (p, t) in parts.iter_mut().zip(inputs) {
                    let len = t.shape()[*axis] * inner;
                    p.extend_from_slice(&g.data()[pos..pos + len]);
                    pos += len;
                }
            }
            parts.into_iter().zip(inputs).map(|(p, t)| like(t, p)).collect()
        }
        Op::Transpose => {
            let s = out.shape();
            vec![like(inputs[0], kernels::transpose(g.data(), s[0], s[1]))]
        }
        Op::IndexSelect { axis, indices } => {
            let x = inputs[0];
            let (outer, len, inner) = kernels::axis_split(x.shape(), *axis);
            let mut d = vec![T::zero(); x.numel()];
            let mut pos = 0;
            for o in 0..outer {
                for &i in indices {
                    let start = (o * len + i) * inner;
                    for (dst, &gv) in d[start..start + inner].iter_mut().zip(&g.data()[pos..pos + inner]) {
                        *dst += gv;
                    }
                    pos += inner;
                }
            }
            vec![like(x, d)]
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = needs[0].then(|| {
                let bt = kernels::transpose(b.data(), k, n);
                kernels::matmul(g.data(), &bt, m, n, k)
            });
            let gb = needs[1].then(|| {
                let at = kernels::transpose(a.data(), m, k);
                kernels::matmul(&at, g.data(), k, m, n)
            });
            vec![ga.and_then(|d| like(a, d)), gb.and_then(|d| like(b, d))]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros([4]));
        let y = x.softmax(0).unwrap();
        assert_eq!(y.value().data(), &[0.25; 4]);
    }

    #[test]
    fn l2_norm_of_zero_is_zero() {
        let tape = Tape::new();
        let x = tape.param(Tensor::<f64>::zeros([3, 2]));
        let n = x.l2_norm();
        assert_eq!(n.item().unwrap(), 0.0);
        tape.backward(n).unwrap();
        assert!(x.grad().unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let tape = Tape::new();
        let x = tape.param(t(&[4], &[1.0, -2.0, 3.0, 0.5]));
        tape.backward(x.mean_all()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn quadratic_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let loss = x.mul(&x).unwrap().sum_all();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_reset() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let loss = x.mul(&x).unwrap().sum_all();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[4.0, 8.0]);
        tape.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::zeros([2, 3]));
        let b = tape.constant(Tensor::<f64>::zeros([2, 3]));
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        let c = tape.constant(Tensor::<f64>::zeros([4]));
        assert!(a.add(&c).is_err());
    }

    #[test]
    fn log2_clamps_and_counts() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[0.0, -1.0, 4.0]));
        let y = x.log2();
        assert_eq!(tape.clamp_count(), 2);
        assert!((y.value().data()[0] - LOG_EPS.log2()).abs() < 1e-12);
        assert_eq!(y.value().data()[2], 2.0);
        tape.backward(y.sum_all()).unwrap();
        assert!(x.grad().unwrap().is_finite());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tape = Tape::new();
        let y = tape
            .constant(t(&[2, 3], &a))
            .matmul(&tape.constant(t(&[3, 4], &b)))
            .unwrap();
        for i in 0..2 {
            for j in 0..4 {
                let mut acc = 0.0;
                for p in 0..3 {
                    acc += a[i * 3 + p] * b[p * 4 + j];
                }
                assert!((y.value().data()[i * 4 + j] - acc).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn nodes_are_recorded_in_topological_order() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = x.relu().sigmoid().sum_all();
        assert_eq!(tape.kind(y), OpKind::SumAll);
        for id in 0..tape.len() {
            let nodes = tape.nodes.borrow();
            assert!(nodes[id].inputs.iter().all(|&i| i < id));
        }
    }

    #[test]
    fn no_grad_inputs_do_not_record_grads() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, 2.0]));
        let w = tape.param(t(&[2], &[0.5, 0.5]));
        let loss = x.mul(&w).unwrap().sum_all();
        tape.backward(loss).unwrap();
        assert!(x.grad().is_none());
        assert_eq!(w.grad().unwrap().data(), &[1.0, 2.0]);
    }
}
