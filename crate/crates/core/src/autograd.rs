//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Tape`]; [`Tape::backward`] walks the
//! nodes once in reverse and accumulates adjoints additively, so a value used
//! twice receives both contributions. Nodes store their forward value, which
//! the local gradient rules read back.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation families, used to name gradient rules (fault injection, reports).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    AddBias,
    MulRow,
    Affine,
    Sigmoid,
    Tanh,
    Relu,
    Sum,
    Reshape,
    Gather,
    Assemble,
    ConcatCols,
    Im2Col,
    MaxPool2,
    Upsample2,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 20] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddBias,
        OpKind::MulRow,
        OpKind::Affine,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Relu,
        OpKind::Sum,
        OpKind::Reshape,
        OpKind::Gather,
        OpKind::Assemble,
        OpKind::ConcatCols,
        OpKind::Im2Col,
        OpKind::MaxPool2,
        OpKind::Upsample2,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddBias => "add_bias",
            OpKind::MulRow => "mul_row",
            OpKind::Affine => "affine",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Sum => "sum",
            OpKind::Reshape => "reshape",
            OpKind::Gather => "gather",
            OpKind::Assemble => "assemble",
            OpKind::ConcatCols => "concat_cols",
            OpKind::Im2Col => "im2col",
            OpKind::MaxPool2 => "maxpool2",
            OpKind::Upsample2 => "upsample2",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown op kind `{s}`")))
    }
}

/// Geometry of an NHWC feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapDims {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl MapDims {
    fn of(shape: &[usize]) -> Result<Self> {
        match *shape {
            [batch, height, width, channels] => Ok(Self {
                batch,
                height,
                width,
                channels,
            }),
            _ => Err(Error::contract(format!("expected NHWC map, got shape {shape:?}"))),
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Sum(Var),
    Reshape(Var),
    Gather { src: Var, rows: Vec<usize> },
    Assemble { parts: Vec<(Var, Vec<usize>)> },
    ConcatCols(Vec<Var>),
    Im2Col { src: Var, dims: MapDims, kernel: usize },
    MaxPool2 { src: Var, argmax: Vec<usize> },
    Upsample2 { src: Var, dims: MapDims },
    CrossEntropy { logits: Var, dlogits: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::MulRow(..) => OpKind::MulRow,
            Op::Affine(..) => OpKind::Affine,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Relu(_) => OpKind::Relu,
            Op::Sum(_) => OpKind::Sum,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Gather { .. } => OpKind::Gather,
            Op::Assemble { .. } => OpKind::Assemble,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::Im2Col { .. } => OpKind::Im2Col,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Upsample2 { .. } => OpKind::Upsample2,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Rebuilt for every forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Raw adjoint, or `None` when the value did not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adjoint as a tensor; values off the loss path get zeros.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches value shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape whose `kind` gradient rule has its sign flipped. Only useful for
    /// checking that gradient verification catches broken rules.
    #[doc(hidden)]
    pub fn with_fault(kind: OpKind) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(kind),
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a value that gradients flow into.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(detached(t), Op::Leaf, true)
    }

    /// Records a constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.constant(Tensor::zeros(shape))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a 1-D bias of length `cols` to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.shape().len() != 1 || tb.len() != ta.cols() {
            return Err(Error::dim("add_bias", ta.shape(), tb.shape()));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data()[i % c])
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    /// Multiplies every row of `a` elementwise by the 1-D vector `v`.
    pub fn mul_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (ta, tv) = (self.value(a), self.value(v));
        if tv.shape().len() != 1 || tv.len() != ta.cols() {
            return Err(Error::dim("mul_row", ta.shape(), tv.shape()));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * tv.data()[i % c])
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(out, Op::MulRow(a, v), rg))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = map(self.value(a), |x| scale * x + shift);
        let rg = self.rg(a);
        self.push(out, Op::Affine(a, scale), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.affine(a, factor, 0.0)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = map(self.value(a), sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Sum of all elements, in ascending flat order, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Selects rows (all axes but the last flattened) of `src`, giving
    /// `[rows.len(), cols]`.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(src);
        let (n, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(Error::contract(format!("row {r} out of range for {n} rows")));
            }
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::new(&[rows.len(), c], data)?;
        let rg = self.rg(src);
        Ok(self.push(
            out,
            Op::Gather {
                src,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Builds a `[total_rows, cols]` tensor by placing the rows of each part
    /// at the given destination rows. Unassigned rows are zero; each
    /// destination row may be written at most once.
    pub fn assemble_rows(&mut self, total_rows: usize, parts: &[(Var, Vec<usize>)]) -> Result<Var> {
        let cols = match parts.first() {
            Some((v, _)) => self.value(*v).cols(),
            None => return Err(Error::contract("assemble_rows needs at least one part")),
        };
        let mut data = vec![0.0; total_rows * cols];
        let mut written = vec![false; total_rows];
        for (v, dest) in parts {
            let t = self.value(*v);
            if t.cols() != cols || t.rows() != dest.len() {
                return Err(Error::dim("assemble_rows", t.shape(), &[dest.len(), cols]));
            }
            for (i, &d) in dest.iter().enumerate() {
                if d >= total_rows || written[d] {
                    return Err(Error::contract(format!("destination row {d} invalid or repeated")));
                }
                written[d] = true;
                data[d * cols..(d + 1) * cols].copy_from_slice(t.row(i));
            }
        }
        let out = Tensor::new(&[total_rows, cols], data)?;
        let rg = parts.iter().any(|(v, _)| self.rg(*v));
        Ok(self.push(
            out,
            Op::Assemble {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenates along the last axis. All inputs must agree on every
    /// other extent.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols needs at least one part"))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::dim("concat_cols", self.shape(first), s));
            }
            total += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(&shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Unrolls `kernel x kernel` zero-padded patches of an NHWC map into rows
    /// of `[B*H*W, kernel*kernel*C]`, column order `(dy, dx, channel)`.
    pub fn im2col(&mut self, src: Var, kernel: usize) -> Result<Var> {
        if kernel % 2 == 0 {
            return Err(Error::contract("im2col kernel must be odd"));
        }
        let dims = MapDims::of(self.shape(src))?;
        let out = im2col_kernel(self.value(src).data(), dims, kernel);
        let cols = kernel * kernel * dims.channels;
        let out = Tensor::new(&[dims.batch * dims.height * dims.width, cols], out)?;
        let rg = self.rg(src);
        Ok(self.push(out, Op::Im2Col { src, dims, kernel }, rg))
    }

    /// 2x2 max pooling with stride 2 over an NHWC map with even extents.
    pub fn maxpool2(&mut self, src: Var) -> Result<Var> {
        let d = MapDims::of(self.shape(src))?;
        if d.height % 2 != 0 || d.width % 2 != 0 {
            return Err(Error::dim("maxpool2", self.shape(src), &[2, 2]));
        }
        let (oh, ow) = (d.height / 2, d.width / 2);
        let x = self.value(src).data();
        let mut out = Vec::with_capacity(d.batch * oh * ow * d.channels);
        let mut argmax = Vec::with_capacity(out.capacity());
        for b in 0..d.batch {
            for i in 0..oh {
                for j in 0..ow {
                    for c in 0..d.channels {
                        let mut best = usize::MAX;
                        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let idx = ((b * d.height + 2 * i + di) * d.width + 2 * j + dj) * d.channels + c;
                            if best == usize::MAX || x[idx] > x[best] {
                                best = idx;
                            }
                        }
                        out.push(x[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let out = Tensor::new(&[d.batch, oh, ow, d.channels], out)?;
        let rg = self.rg(src);
        Ok(self.push(out, Op::MaxPool2 { src, argmax }, rg))
    }

    /// Nearest-neighbour 2x upsampling of an NHWC map.
    pub fn upsample2(&mut self, src: Var) -> Result<Var> {
        let d = MapDims::of(self.shape(src))?;
        let x = self.value(src).data();
        let (oh, ow) = (2 * d.height, 2 * d.width);
        let mut out = Vec::with_capacity(d.batch * oh * ow * d.channels);
        for b in 0..d.batch {
            for i in 0..oh {
                for j in 0..ow {
                    let base = ((b * d.height + i / 2) * d.width + j / 2) * d.channels;
                    out.extend_from_slice(&x[base..base + d.channels]);
                }
            }
        }
        let out = Tensor::new(&[d.batch, oh, ow, d.channels], out)?;
        let rg = self.rg(src);
        Ok(self.push(out, Op::Upsample2 { src, dims: d }, rg))
    }

    /// Same-padded, stride-1 convolution of an NHWC map. `weight` is
    /// `[kernel*kernel*C_in, C_out]`, `bias` is `[C_out]`.
    pub fn conv2d(&mut self, src: Var, weight: Var, bias: Var, kernel: usize) -> Result<Var> {
        let d = MapDims::of(self.shape(src))?;
        let cols = if kernel == 1 {
            self.reshape(src, &[d.batch * d.height * d.width, d.channels])?
        } else {
            self.im2col(src, kernel)?
        };
        let y = self.matmul(cols, weight)?;
        let y = self.add_bias(y, bias)?;
        let c_out = self.value(y).cols();
        self.reshape(y, &[d.batch, d.height, d.width, c_out])
    }

    /// Mean over counted rows of `weight[label] * -log softmax(logits)[label]`.
    /// `targets[i] == None` excludes row `i`. With no counted rows the loss is 0.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        class_weights: &[f64],
    ) -> Result<Var> {
        let t = self.value(logits);
        let (rows, n) = (t.rows(), t.cols());
        if targets.len() != rows {
            return Err(Error::dim("cross_entropy", t.shape(), &[targets.len()]));
        }
        if class_weights.len() != n {
            return Err(Error::dim("cross_entropy", t.shape(), &[class_weights.len()]));
        }
        let count = targets.iter().filter(|l| l.is_some()).count();
        let mut dlogits = vec![0.0; rows * n];
        let mut total = 0.0;
        for (i, target) in targets.iter().enumerate() {
            let Some(label) = *target else { continue };
            if label >= n {
                return Err(Error::Label {
                    pixel: i,
                    label,
                    classes: n,
                });
            }
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            let log_denom = denom.ln();
            let w = class_weights[label];
            total += w * (log_denom - (row[label] - max));
            let g = &mut dlogits[i * n..(i + 1) * n];
            for (c, gc) in g.iter_mut().enumerate() {
                let p = ((row[c] - max) - log_denom).exp();
                let onehot = if c == label { 1.0 } else { 0.0 };
                *gc = w * (p - onehot) / count as f64;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, dlogits }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                let sign = if self.fault == Some(node.op.kind()) { -1.0 } else { 1.0 };
                self.propagate(node, &g, sign, &mut grads);
            }
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], sign: f64, grads: &mut [Option<Vec<f64>>]) {
        if let Op::Gather { src, rows } = &node.op {
            // Scatter straight into the source adjoint; gathers are often a
            // handful of rows out of a large tensor.
            if !self.nodes[src.0].requires_grad {
                return;
            }
            let t = self.value(*src);
            let c = t.cols();
            let acc = grads[src.0].get_or_insert_with(|| vec![0.0; t.len()]);
            for (i, &r) in rows.iter().enumerate() {
                acc[r * c..(r + 1) * c]
                    .iter_mut()
                    .zip(&g[i * c..(i + 1) * c])
                    .for_each(|(a, b)| *a += sign * b);
            }
            return;
        }
        let mut send = |v: Var, local: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let local: Vec<f64> = if sign < 0.0 { local.into_iter().map(|x| -x).collect() } else { local };
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&local).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(local),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(*a) {
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let bp = &tb.data()[p * n..(p + 1) * n];
                            da[i * k + p] = gi.iter().zip(bp).map(|(x, y)| x * y).sum();
                        }
                    }
                    send(*a, da);
                }
                if self.rg(*b) {
                    // dB = A^T G
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ta.data()[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let row = &mut db[p * n..(p + 1) * n];
                            row.iter_mut().zip(gi).for_each(|(d, x)| *d += aip * x);
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                send(*a, g.iter().zip(tb).map(|(x, y)| x * y).collect());
                send(*b, g.iter().zip(ta).map(|(x, y)| x * y).collect());
            }
            Op::AddBias(a, bias) => {
                send(*a, g.to_vec());
                let c = self.value(*bias).len();
                let mut db = vec![0.0; c];
                for (i, x) in g.iter().enumerate() {
                    db[i % c] += x;
                }
                send(*bias, db);
            }
            Op::MulRow(a, v) => {
                let (ta, tv) = (self.value(*a).data(), self.value(*v).data());
                let c = tv.len();
                send(*a, g.iter().enumerate().map(|(i, x)| x * tv[i % c]).collect());
                let mut dv = vec![0.0; c];
                for (i, x) in g.iter().enumerate() {
                    dv[i % c] += x * ta[i];
                }
                send(*v, dv);
            }
            Op::Affine(a, scale) => send(*a, g.iter().map(|x| x * scale).collect()),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                send(*a, g.iter().zip(y).map(|(x, s)| x * s * (1.0 - s)).collect());
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                send(*a, g.iter().zip(y).map(|(x, t)| x * (1.0 - t * t)).collect());
            }
            Op::Relu(a) => {
                let xin = self.value(*a).data();
                send(
                    *a,
                    g.iter()
                        .zip(xin)
                        .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                        .collect(),
                );
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).len()]),
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Gather { .. } => unreachable!("handled above"),
            Op::Assemble { parts } => {
                let c = node.value.cols();
                for (v, dest) in parts {
                    let mut d = Vec::with_capacity(dest.len() * c);
                    for &r in dest {
                        d.extend_from_slice(&g[r * c..(r + 1) * c]);
                    }
                    send(*v, d);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut d = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                    }
                    offset += c;
                    send(p, d);
                }
            }
            Op::Im2Col { src, dims, kernel } => {
                send(*src, col2im_kernel(g, *dims, *kernel));
            }
            Op::MaxPool2 { src, argmax } => {
                let mut d = vec![0.0; self.value(*src).len()];
                for (x, &idx) in g.iter().zip(argmax) {
                    d[idx] += x;
                }
                send(*src, d);
            }
            Op::Upsample2 { src, dims } => {
                let mut d = vec![0.0; self.value(*src).len()];
                let (oh, ow, c) = (2 * dims.height, 2 * dims.width, dims.channels);
                for b in 0..dims.batch {
                    for i in 0..oh {
                        for j in 0..ow {
                            let from = ((b * oh + i) * ow + j) * c;
                            let to = ((b * dims.height + i / 2) * dims.width + j / 2) * c;
                            for ch in 0..c {
                                d[to + ch] += g[from + ch];
                            }
                        }
                    }
                }
                send(*src, d);
            }
            Op::CrossEntropy { logits, dlogits } => {
                send(*logits, dlogits.iter().map(|x| x * g[0]).collect());
            }
        }
    }
}

fn detached(t: &Tensor) -> Tensor {
    Tensor::new(t.shape(), t.data().to_vec()).expect("shape already validated")
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-major `[m,k] x [k,n]`. Each output accumulates from `0.0` over the
/// inner index in ascending order.
pub fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let bp = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(bp).for_each(|(o, &y)| *o += aip * y);
        }
    }
    out
}

fn im2col_kernel(x: &[f64], d: MapDims, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let c = d.channels;
    let cols = k * k * c;
    let mut out = vec![0.0; d.batch * d.height * d.width * cols];
    for b in 0..d.batch {
        for i in 0..d.height {
            for j in 0..d.width {
                let row = ((b * d.height + i) * d.width + j) * cols;
                for dy in 0..k {
                    let si = i as isize + dy as isize - pad;
                    if si < 0 || si >= d.height as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let sj = j as isize + dx as isize - pad;
                        if sj < 0 || sj >= d.width as isize {
                            continue;
                        }
                        let src = ((b * d.height + si as usize) * d.width + sj as usize) * c;
                        let dst = row + (dy * k + dx) * c;
                        out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    out
}

fn col2im_kernel(g: &[f64], d: MapDims, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let c = d.channels;
    let cols = k * k * c;
    let mut out = vec![0.0; d.batch * d.height * d.width * c];
    for b in 0..d.batch {
        for i in 0..d.height {
            for j in 0..d.width {
                let row = ((b * d.height + i) * d.width + j) * cols;
                for dy in 0..k {
                    let si = i as isize + dy as isize - pad;
                    if si < 0 || si >= d.height as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let sj = j as isize + dx as isize - pad;
                        if sj < 0 || sj >= d.width as isize {
                            continue;
                        }
                        let dst = ((b * d.height + si as usize) * d.width + sj as usize) * c;
                        let src = row + (dy * k + dx) * c;
                        for ch in 0..c {
                            out[dst + ch] += g[src + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.at(&[i, p]) * b.at(&[p, j]);
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(t2(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);

        let i2 = tape.constant(Tensor::eye(2));
        let c = tape.matmul(i2, b).unwrap();
        assert_eq!(tape.value(c).data(), tape.value(b).data());

        let z = tape.zeros(&[2, 3]);
        let any = tape.constant(Tensor::uniform(&mut Rng::new(1), &[3, 4], -2.0, 2.0).unwrap());
        let c = tape.matmul(z, any).unwrap();
        assert_eq!(tape.value(c).data(), &[0.0; 8]);
    }

    #[test]
    fn matmul_matches_triple_loop_bitwise() {
        let mut rng = Rng::new(5);
        let a = Tensor::uniform(&mut rng, &[7, 13], -2.0, 2.0).unwrap();
        let b = Tensor::uniform(&mut rng, &[13, 5], -2.0, 2.0).unwrap();
        let fast = matmul_kernel(a.data(), b.data(), 7, 13, 5);
        assert_eq!(fast, naive_matmul(&a, &b));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.zeros(&[2, 3]);
        let b = tape.zeros(&[2, 3]);
        match tape.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[3], vec![0.0, 2.0, -1.0]).unwrap());
        let s = tape.sigmoid(x);
        let t = tape.tanh(x);
        assert_eq!(tape.value(s).data()[0], 0.5);
        assert!((tape.value(s).data()[1] - 0.880_797_077_977_882_3).abs() < 1e-15);
        assert_eq!(tape.value(t).data()[0], 0.0);
        let y = tape.constant(Tensor::zeros(&[2]));
        assert!(tape.add(x, y).is_err());
        assert!(tape.mul(x, y).is_err());
    }

    #[test]
    fn linear_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::uniform(&mut Rng::new(2), &[2, 3], -1.0, 1.0).unwrap());
        let y = tape.scale(x, 3.0);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[3.0; 6]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::zeros(&[4]));
        let y = tape.sigmoid(x);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.25; 4]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::new(&[2], vec![1.5, -0.5]).unwrap());
        let y = tape.add(x, x).unwrap();
        let sq = tape.mul(y, x).unwrap();
        let loss = tape.sum(sq);
        // loss = 2 x^2, d/dx = 4x
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[6.0, -2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_value_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::zeros(&[2]));
        let unused = tape.param(&Tensor::full(&[3], 1.0));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn assemble_rejects_repeated_rows() {
        let mut tape = Tape::new();
        let a = tape.zeros(&[1, 2]);
        let b = tape.zeros(&[1, 2]);
        assert!(tape.assemble_rows(3, &[(a, vec![1]), (b, vec![1])]).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let l = tape.param(&Tensor::zeros(&[4, 3]));
        let loss = tape
            .cross_entropy(l, &[Some(0), Some(1), None, Some(2)], &[1.0; 3])
            .unwrap();
        assert!((tape.value(loss).data()[0] - 3f64.ln()).abs() < 1e-15);
        assert!(matches!(
            tape.cross_entropy(l, &[Some(3), None, None, None], &[1.0; 3]),
            Err(Error::Label { pixel: 0, .. })
        ));
    }

    #[test]
    fn op_kind_names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
    }
}
