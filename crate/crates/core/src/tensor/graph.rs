use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::kernels::{self, ConvGeometry};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// Operation family, used to name ops in reports and to target an
/// [`AdjointFault`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpTag {
    Leaf,
    Binary,
    Affine,
    Activation,
    MatMul,
    Transpose,
    Softmax,
    LogSoftmax,
    Conv2d,
    Upsample,
    Reduce,
    Concat,
    GatherRows,
    Reshape,
    Permute,
    Select,
}

/// Scales every adjoint an op of the given family sends to its inputs.
/// Only used as a negative control for gradient verification.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdjointFault {
    pub op: OpTag,
    pub scale: f64,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        map: Option<Vec<usize>>,
    },
    Affine {
        x: Var,
        scale: T,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        x: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Reduce {
        x: Var,
        map: Vec<usize>,
        scale: T,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    GatherRows {
        x: Var,
        indices: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Select {
        x: Var,
        index: usize,
    },
}

impl<T> Op<T> {
    fn tag(&self) -> OpTag {
        match self {
            Op::Leaf => OpTag::Leaf,
            Op::Binary { .. } => OpTag::Binary,
            Op::Affine { .. } => OpTag::Affine,
            Op::Activation { .. } => OpTag::Activation,
            Op::MatMul { .. } => OpTag::MatMul,
            Op::Transpose { .. } => OpTag::Transpose,
            Op::Softmax { .. } => OpTag::Softmax,
            Op::LogSoftmax { .. } => OpTag::LogSoftmax,
            Op::Conv2d { .. } => OpTag::Conv2d,
            Op::Upsample { .. } => OpTag::Upsample,
            Op::Reduce { .. } => OpTag::Reduce,
            Op::Concat { .. } => OpTag::Concat,
            Op::GatherRows { .. } => OpTag::GatherRows,
            Op::Reshape { .. } => OpTag::Reshape,
            Op::Permute { .. } => OpTag::Permute,
            Op::Select { .. } => OpTag::Select,
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Execution-ordered record of tensor operations.
///
/// Nodes are appended as operations run, so the record is already in
/// topological order; [`Graph::backward`] walks it in exact reverse.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<AdjointFault>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: AdjointFault) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn op_tag(&self, v: Var) -> OpTag {
        self.nodes[v.0].op.tag()
    }

    /// Hash of the discrete choices made while recording: ReLU sign
    /// patterns and gathered row indices. Two recordings of the same
    /// expression with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Activation {
                    x,
                    kind: Activation::Relu,
                } => {
                    for &v in self.nodes[x.0].value.data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::GatherRows { indices, .. } => indices.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    // ---------------------------------------------------------------- ops

    /// Elementwise `a ∘ b`; `b` may broadcast along trailing axes.
    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let map = kernels::broadcast_map("ew_binary", &shape, self.shape(b))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<T> = match &map {
            None => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Some(m) => av.iter().zip(m).map(|(&x, &j)| f(x, bv[j])).collect(),
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Binary { kind, a, b, map }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Div)
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Var {
        self.affine(x, scale, T::zero())
    }

    pub fn add_scalar(&mut self, x: Var, shift: T) -> Var {
        self.affine(x, T::one(), shift)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = self.value(x).map(|v| match kind {
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(T::zero()),
        });
        self.push(value, Op::Activation { x, kind }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm_acc(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 {
            return Err(Error::invalid("transpose", format!("need 2-D, got {shape:?}")));
        }
        let (r, c) = (shape[0], shape[1]);
        let value = Tensor::new(vec![c, r], transpose2(self.value(x).data(), r, c))?;
        Ok(self.push(value, Op::Transpose { x }, &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax_axis", &shape, axis)?;
        let data = kernels::softmax_axis(self.value(x).data(), &shape, axis, false);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("log_softmax_axis", &shape, axis)?;
        let data = kernels::softmax_axis(self.value(x).data(), &shape, axis, true);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Cross-correlation of `x[B,C,H,W]` with `w[O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let geo = conv_geometry(&sx, &sw, stride, padding)?;
        let (batch, out_c) = (sx[0], sw[0]);
        let (rows, ncols) = (geo.col_rows(), geo.col_cols());
        let in_len = geo.channels * geo.height * geo.width;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); batch * out_c * ncols];
        let mut cols = vec![T::zero(); rows * ncols];
        for b in 0..batch {
            kernels::im2col(&xv[b * in_len..(b + 1) * in_len], &geo, &mut cols);
            T::gemm_acc(
                out_c,
                rows,
                ncols,
                wv,
                rows as isize,
                1,
                &cols,
                ncols as isize,
                1,
                &mut out[b * out_c * ncols..(b + 1) * out_c * ncols],
            );
        }
        let value = Tensor::new(vec![batch, out_c, geo.out_h, geo.out_w], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, stride, padding }, &[x, w]))
    }

    /// Nearest-neighbour upsampling of the last two axes by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if factor == 0 || shape.len() < 2 {
            return Err(Error::invalid(
                "upsample_nearest",
                format!("factor {factor} on shape {shape:?}"),
            ));
        }
        if factor == 1 {
            return self.reshape(x, shape);
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes: usize = shape[..shape.len() - 2].iter().product();
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                let row = &src[(oy / factor) * w..(oy / factor + 1) * w];
                for ox in 0..ow {
                    out.push(row[ox / factor]);
                }
            }
        }
        let mut out_shape = shape;
        let rank = out_shape.len();
        out_shape[rank - 2] = oh;
        out_shape[rank - 1] = ow;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Upsample { x, factor }, &[x]))
    }

    /// Sum or mean over a set of axes; reduced axes are dropped. Reducing
    /// every axis yields shape `[1]`.
    pub fn reduce(&mut self, x: Var, axes: &[usize], kind: ReduceKind) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        for (i, &a) in axes.iter().enumerate() {
            check_axis("reduce", &shape, a)?;
            if axes[..i].contains(&a) {
                return Err(Error::invalid("reduce", format!("axis {a} repeated")));
            }
        }
        let kept: Vec<usize> = shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let scale = match kind {
            ReduceKind::Sum => T::one(),
            ReduceKind::Mean => T::one() / T::from_f64_lossy(count as f64),
        };
        let map =
            kernels::broadcast_map("reduce", &shape, &kept)?.unwrap_or_else(|| (0..shape.iter().product()).collect());
        let mut out = vec![T::zero(); out_shape.iter().product()];
        for (&v, &j) in self.value(x).data().iter().zip(&map) {
            out[j] = out[j] + v;
        }
        for v in &mut out {
            *v = *v * scale;
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Reduce { x, map, scale }, &[x]))
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, ReduceKind::Sum)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, ReduceKind::Mean)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, &axes, ReduceKind::Sum).expect("all axes are valid")
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(x, &axes, ReduceKind::Mean).expect("all axes are valid")
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat", "empty input list"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&base, axis);
        let mut out_shape = base;
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let rows = inputs
            .iter()
            .map(|&v| {
                let mut shape = vec![1];
                shape.extend_from_slice(self.shape(v));
                self.reshape(v, shape)
            })
            .collect::<Result<Vec<_>>>()?;
        self.concat(&rows, 0)
    }

    /// Rows of `x` (first axis) at `indices`; duplicates allowed.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if indices.is_empty() {
            return Err(Error::invalid("gather_rows", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(Error::invalid(
                "gather_rows",
                format!("row {bad} out of range for {} rows", shape[0]),
            ));
        }
        let row: usize = shape[1..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&xv[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::invalid(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", shape.len()),
            ));
        }
        let (out_shape, data) = permute_data(self.value(x).data(), &shape, perm);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    /// Slice `index` of the leading axis, with that axis removed.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || index >= shape[0] {
            return Err(Error::invalid("select", format!("index {index} on shape {shape:?}")));
        }
        let row: usize = shape[1..].iter().product();
        let data = self.value(x).data()[index * row..(index + 1) * row].to_vec();
        let value = Tensor::new(shape[1..].to_vec(), data)?;
        Ok(self.push(value, Op::Select { x, index }, &[x]))
    }

    // ----------------------------------------------------------- backward

    /// Accumulates `d loss / d leaf` into every trainable leaf reachable
    /// from `loss`. Repeated calls add to existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0].value;
        if root.len() != 1 {
            return Err(Error::NonScalarRoot(root.shape().to_vec()));
        }
        let mut adjoints: Vec<Option<Vec<T>>> = Vec::new();
        adjoints.resize_with(loss.0 + 1, || None);
        adjoints[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(adj) = adjoints[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let node = &self.nodes[id];
            if let Op::Leaf = node.op {
                let shape = node.value.shape().to_vec();
                let slot = &mut self.nodes[id].grad;
                match slot {
                    Some(g) => {
                        for (acc, &d) in g.data_mut().iter_mut().zip(&adj) {
                            *acc = *acc + d;
                        }
                    }
                    None => *slot = Some(Tensor::new(shape, adj)?),
                }
                continue;
            }
            let mut contributions = self.input_adjoints(id, &adj);
            if let Some(fault) = self.fault {
                if fault.op == node.op.tag() {
                    let s = T::from_f64_lossy(fault.scale);
                    for (_, c) in &mut contributions {
                        c.iter_mut().for_each(|v| *v = *v * s);
                    }
                }
            }
            for (input, contribution) in contributions {
                match &mut adjoints[input.0] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(contribution) {
                            *e = *e + c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    /// Adjoints that node `id` sends to each of its trainable inputs.
    fn input_adjoints(&self, id: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[id];
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        let val = |v: &Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, map } => {
                let (av, bv) = (val(a), val(b));
                let bi = |i: usize| map.as_ref().map_or(i, |m| m[i]);
                if wants(a) {
                    let da = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                        BinaryKind::Mul => g.iter().enumerate().map(|(i, &d)| d * bv[bi(i)]).collect(),
                        BinaryKind::Div => g.iter().enumerate().map(|(i, &d)| d / bv[bi(i)]).collect(),
                    };
                    out.push((*a, da));
                }
                if wants(b) {
                    let y = node.value.data();
                    let mut db = vec![T::zero(); bv.len()];
                    for (i, &d) in g.iter().enumerate() {
                        let j = bi(i);
                        let term = match kind {
                            BinaryKind::Add => d,
                            BinaryKind::Sub => -d,
                            BinaryKind::Mul => d * av[i],
                            BinaryKind::Div => -d * y[i] / bv[j],
                        };
                        db[j] = db[j] + term;
                    }
                    out.push((*b, db));
                }
            }
            Op::Affine { x, scale } => {
                if wants(x) {
                    out.push((*x, g.iter().map(|&d| d * *scale).collect()));
                }
            }
            Op::Activation { x, kind } => {
                if wants(x) {
                    let y = node.value.data();
                    let xv = val(x);
                    let dx = g
                        .iter()
                        .enumerate()
                        .map(|(i, &d)| match kind {
                            Activation::Sigmoid => d * y[i] * (T::one() - y[i]),
                            Activation::Tanh => d * (T::one() - y[i] * y[i]),
                            Activation::Relu => {
                                if xv[i] > T::zero() {
                                    d
                                } else {
                                    T::zero()
                                }
                            }
                        })
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(a) {
                    // g[m×n] · bᵀ[n×k]
                    let mut da = vec![T::zero(); m * k];
                    T::gemm_acc(m, n, k, g, n as isize, 1, val(b), 1, n as isize, &mut da);
                    out.push((*a, da));
                }
                if wants(b) {
                    // aᵀ[k×m] · g[m×n]
                    let mut db = vec![T::zero(); k * n];
                    T::gemm_acc(k, m, n, val(a), 1, k as isize, g, n as isize, 1, &mut db);
                    out.push((*b, db));
                }
            }
            Op::Transpose { x } => {
                if wants(x) {
                    let s = node.value.shape();
                    out.push((*x, transpose2(g, s[0], s[1])));
                }
            }
            Op::Softmax { x, axis } => {
                if wants(x) {
                    let y = node.value.data();
                    let (outer, len, inner) = kernels::split_axis(node.value.shape(), *axis);
                    let mut dx = vec![T::zero(); g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot =
                                (0..len).fold(T::zero(), |acc, a| acc + g[base + a * inner] * y[base + a * inner]);
                            for a in 0..len {
                                let idx = base + a * inner;
                                dx[idx] = y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::LogSoftmax { x, axis } => {
                if wants(x) {
                    let y = node.value.data();
                    let (outer, len, inner) = kernels::split_axis(node.value.shape(), *axis);
                    let mut dx = vec![T::zero(); g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let total = (0..len).fold(T::zero(), |acc, a| acc + g[base + a * inner]);
                            for a in 0..len {
                                let idx = base + a * inner;
                                dx[idx] = g[idx] - y[idx].exp() * total;
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Conv2d { x, w, stride, padding } => {
                let sx = self.nodes[x.0].value.shape();
                let sw = self.nodes[w.0].value.shape();
                let geo = conv_geometry(sx, sw, *stride, *padding).expect("validated in forward");
                let (batch, out_c) = (sx[0], sw[0]);
                let (rows, ncols) = (geo.col_rows(), geo.col_cols());
                let in_len = geo.channels * geo.height * geo.width;
                let (xv, wv) = (val(x), val(w));
                let mut dx = wants(x).then(|| vec![T::zero(); xv.len()]);
                let mut dw = wants(w).then(|| vec![T::zero(); wv.len()]);
                let mut cols = vec![T::zero(); rows * ncols];
                let mut dcols = vec![T::zero(); rows * ncols];
                for b in 0..batch {
                    let gb = &g[b * out_c * ncols..(b + 1) * out_c * ncols];
                    if let Some(dw) = dw.as_mut() {
                        kernels::im2col(&xv[b * in_len..(b + 1) * in_len], &geo, &mut cols);
                        // g[O×P] · colsᵀ[P×R]
                        T::gemm_acc(out_c, ncols, rows, gb, ncols as isize, 1, &cols, 1, ncols as isize, dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        dcols.iter_mut().for_each(|v| *v = T::zero());
                        // wᵀ[R×O] · g[O×P]
                        T::gemm_acc(
                            rows,
                            out_c,
                            ncols,
                            wv,
                            1,
                            rows as isize,
                            gb,
                            ncols as isize,
                            1,
                            &mut dcols,
                        );
                        kernels::col2im_acc(&dcols, &geo, &mut dx[b * in_len..(b + 1) * in_len]);
                    }
                }
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
            }
            Op::Upsample { x, factor } => {
                if wants(x) {
                    let s = self.nodes[x.0].value.shape();
                    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                    let planes: usize = s[..s.len() - 2].iter().product();
                    let (oh, ow) = (h * factor, w * factor);
                    let mut dx = vec![T::zero(); planes * h * w];
                    for p in 0..planes {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let src = p * h * w + (oy / factor) * w + ox / factor;
                                dx[src] = dx[src] + g[p * oh * ow + oy * ow + ox];
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Reduce { x, map, scale } => {
                if wants(x) {
                    out.push((*x, map.iter().map(|&j| g[j] * *scale).collect()));
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = kernels::split_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let len = self.nodes[v.0].value.shape()[*axis] * inner;
                    if wants(v) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        out.push((*v, d));
                    }
                    offset += len;
                }
            }
            Op::GatherRows { x, indices } => {
                if wants(x) {
                    let src = &self.nodes[x.0].value;
                    let row = src.len() / src.shape()[0];
                    let mut dx = vec![T::zero(); src.len()];
                    for (k, &i) in indices.iter().enumerate() {
                        for c in 0..row {
                            dx[i * row + c] = dx[i * row + c] + g[k * row + c];
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Reshape { x } => {
                if wants(x) {
                    out.push((*x, g.to_vec()));
                }
            }
            Op::Permute { x, perm } => {
                if wants(x) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let (_, dx) = permute_data(g, node.value.shape(), &inverse);
                    out.push((*x, dx));
                }
            }
            Op::Select { x, index } => {
                if wants(x) {
                    let mut dx = vec![T::zero(); self.nodes[x.0].value.len()];
                    dx[index * g.len()..(index + 1) * g.len()].copy_from_slice(g);
                    out.push((*x, dx));
                }
            }
        }
        out
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::invalid(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

fn transpose2<T: Copy>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(x[r * cols + c]);
        }
    }
    out
}

fn permute_data<T: Copy>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut counter = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..x.len() {
        out.push(x[pos]);
        for axis in (0..rank).rev() {
            counter[axis] += 1;
            pos += strides[axis];
            if counter[axis] < out_shape[axis] {
                break;
            }
            pos -= strides[axis] * counter[axis];
            counter[axis] = 0;
        }
    }
    (out_shape, out)
}

fn conv_geometry(sx: &[usize], sw: &[usize], stride: usize, padding: usize) -> Result<ConvGeometry> {
    if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: sx.to_vec(),
            rhs: sw.to_vec(),
        });
    }
    let (kh, kw) = (sw[2], sw[3]);
    if kh % 2 == 0 || kw % 2 == 0 || stride == 0 {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {kh}×{kw} must be odd, stride {stride} positive"),
        ));
    }
    let (h, w) = (sx[2] + 2 * padding, sx[3] + 2 * padding);
    if h < kh || w < kw {
        return Err(Error::invalid("conv2d", "padding leaves no output pixels"));
    }
    Ok(ConvGeometry {
        channels: sx[1],
        height: sx[2],
        width: sx[3],
        kh,
        kw,
        stride,
        padding,
        out_h: (h - kh) / stride + 1,
        out_w: (w - kw) / stride + 1,
    })
}
