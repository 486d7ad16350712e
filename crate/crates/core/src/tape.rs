//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every op appends a node to the [`Tape`]; [`Tape::backward`] replays the
//! recorded rules in reverse order from a scalar root. A tape is built for one
//! optimization step and then dropped or [cleared](Tape::clear).

use std::fmt;

use crate::error::{AibError, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Names of the differentiable operations, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Relu,
    Sigmoid,
    Softplus,
    Ln,
    Square,
    Sum,
    Mean,
    Reshape,
    Linear,
    Conv2d,
    MaxPool2d,
    ChannelMul,
    SliceCols,
    SoftmaxCrossEntropy,
    StraightThrough,
    Gather,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Softplus,
        OpKind::Ln,
        OpKind::Square,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Reshape,
        OpKind::Linear,
        OpKind::Conv2d,
        OpKind::MaxPool2d,
        OpKind::ChannelMul,
        OpKind::SliceCols,
        OpKind::SoftmaxCrossEntropy,
        OpKind::StraightThrough,
        OpKind::Gather,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::Ln => "ln",
            OpKind::Square => "square",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Reshape => "reshape",
            OpKind::Linear => "linear",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2d => "max_pool2d",
            OpKind::ChannelMul => "channel_mul",
            OpKind::SliceCols => "slice_cols",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::StraightThrough => "straight_through",
            OpKind::Gather => "gather",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Ln(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geometry: ConvGeometry,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    ChannelMul {
        features: Var,
        mask: Var,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    StraightThrough(Var),
    Gather {
        table: Var,
        index: Vec<usize>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Softplus(..) => OpKind::Softplus,
            Op::Ln(..) => OpKind::Ln,
            Op::Square(..) => OpKind::Square,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Linear { .. } => OpKind::Linear,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::ChannelMul { .. } => OpKind::ChannelMul,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::StraightThrough(..) => OpKind::StraightThrough,
            Op::Gather { .. } => OpKind::Gather,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
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

/// Row-wise softmax of an `[N, C]` logit matrix.
pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Record of operations for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    fault: Option<OpKind>,
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AibError::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Corrupts the backward rule of `kind` (gradients scaled by 1.5).
    /// Used to verify that the gradient suites catch broken rules.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.consumed = false;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable leaf (parameter or input under test).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, ng))
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

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        let ng = self.ng(a);
        self.push(value, Op::Mean(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// Collapses every axis after the first: `[N, ...] -> [N, D]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let n = shape[0];
        let d = shape[1..].iter().product::<usize>();
        self.reshape(a, &[n, d])
    }

    /// Value copy that blocks gradient flow.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    /// `input[N,D] * weight[D,M] + bias[M]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[0] || b.numel() != w.shape()[1] {
            return Err(AibError::Dimension(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let (n, d, m) = (x.shape()[0], x.shape()[1], w.shape()[1]);
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(b.data());
        }
        kernels::gemm(n, d, m, 1.0, x.data(), (d, 1), w.data(), (m, 1), 1.0, &mut out);
        let value = Tensor::new([n, m], out)?;
        let ng = self.ng(input) || self.ng(weight) || self.ng(bias);
        Ok(self.push(value, Op::Linear { input, weight, bias }, ng))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        if x.rank() != 4 || w.rank() != 4 {
            return Err(AibError::Dimension(format!(
                "conv2d: expected rank-4 input and weight, got {:?} and {:?}",
                x.shape(),
                w.shape()
            )));
        }
        if x.shape()[1] != w.shape()[1] {
            return Err(AibError::Dimension(format!(
                "conv2d: input has {} channels but weight expects {}",
                x.shape()[1],
                w.shape()[1]
            )));
        }
        if b.numel() != w.shape()[0] {
            return Err(AibError::Dimension(format!(
                "conv2d: bias has {} entries for {} filters",
                b.numel(),
                w.shape()[0]
            )));
        }
        if stride == 0 {
            return Err(AibError::Contract("conv2d: stride must be at least 1".into()));
        }
        let geometry = ConvGeometry {
            batch: x.shape()[0],
            in_channels: x.shape()[1],
            height: x.shape()[2],
            width: x.shape()[3],
            filters: w.shape()[0],
            kernel_h: w.shape()[2],
            kernel_w: w.shape()[3],
            stride,
            padding,
        };
        if geometry.kernel_h > geometry.height + 2 * padding || geometry.kernel_w > geometry.width + 2 * padding {
            return Err(AibError::Dimension(format!(
                "conv2d: kernel {}x{} larger than padded input {}x{}",
                geometry.kernel_h,
                geometry.kernel_w,
                geometry.height + 2 * padding,
                geometry.width + 2 * padding
            )));
        }
        let out = kernels::conv2d_forward(&geometry, x.data(), w.data(), b.data());
        let value = Tensor::new(
            [geometry.batch, geometry.filters, geometry.out_height(), geometry.out_width()],
            out,
        )?;
        let ng = self.ng(input) || self.ng(weight) || self.ng(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            },
            ng,
        ))
    }

    /// Max pooling over non-overlapping `k x k` windows (floor on ragged edges).
    pub fn max_pool2d(&mut self, input: Var, k: usize) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 4 || k == 0 || x.shape()[2] < k || x.shape()[3] < k {
            return Err(AibError::Dimension(format!(
                "max_pool2d: window {k} does not fit input {:?}",
                x.shape()
            )));
        }
        let s = x.shape();
        let (out, argmax) = kernels::max_pool_forward(x.data(), s[0] * s[1], s[2], s[3], k);
        let value = Tensor::new([s[0], s[1], s[2] / k, s[3] / k], out)?;
        let ng = self.ng(input);
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, ng))
    }

    /// `features[N,C,H,W] * mask[N,1,H,W]`, broadcasting the mask over channels.
    pub fn channel_mul(&mut self, features: Var, mask: Var) -> Result<Var> {
        let (f, m) = (self.value(features), self.value(mask));
        let (fs, ms) = (f.shape(), m.shape());
        if fs.len() != 4 || ms.len() != 4 || ms[1] != 1 || fs[0] != ms[0] || fs[2..] != ms[2..] {
            return Err(AibError::Dimension(format!(
                "channel_mul: features {fs:?} and mask {ms:?} disagree"
            )));
        }
        let plane = fs[2] * fs[3];
        let mut out = Vec::with_capacity(f.numel());
        for n in 0..fs[0] {
            let mrow = &m.data()[n * plane..(n + 1) * plane];
            for c in 0..fs[1] {
                let start = (n * fs[1] + c) * plane;
                out.extend(f.data()[start..start + plane].iter().zip(mrow).map(|(a, b)| a * b));
            }
        }
        let value = Tensor::new(fs, out)?;
        let ng = self.ng(features) || self.ng(mask);
        Ok(self.push(value, Op::ChannelMul { features, mask }, ng))
    }

    /// Columns `[start, start + len)` of an `[N, D]` matrix.
    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        if x.rank() != 2 || len == 0 || start + len > x.shape()[1] {
            return Err(AibError::Dimension(format!(
                "slice_cols: columns {start}..{} out of range for {:?}",
                start + len,
                x.shape()
            )));
        }
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let mut out = Vec::with_capacity(n * len);
        for row in x.data().chunks(d) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new([n, len], out)?;
        let ng = self.ng(input);
        Ok(self.push(value, Op::SliceCols { input, start }, ng))
    }

    /// Mean over the batch of `-log softmax(logits)[n, label_n]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if x.rank() != 2 || x.shape()[0] != labels.len() {
            return Err(AibError::Dimension(format!(
                "softmax_cross_entropy: logits {:?} with {} labels",
                x.shape(),
                labels.len()
            )));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(AibError::Input(format!("label {bad} outside [0, {c})")));
        }
        let mut loss = 0.0;
        for (row, &label) in x.data().chunks(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        let probs = softmax_rows(x.data(), c);
        let value = Tensor::scalar(loss / n as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Forward value `quantized`, backward identity into `a`.
    pub fn straight_through(&mut self, a: Var, quantized: &Tensor) -> Result<Var> {
        same_shape("straight_through", self.value(a), quantized)?;
        let ng = self.ng(a);
        Ok(self.push(quantized.clone(), Op::StraightThrough(a), ng))
    }

    /// `out[i] = table[index[i]]`, shaped as `shape`.
    pub fn gather(&mut self, table: Var, index: &[usize], shape: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = index.iter().find(|&&i| i >= t.numel()) {
            return Err(AibError::Dimension(format!(
                "gather: index {bad} out of range for table of {}",
                t.numel()
            )));
        }
        let data = index.iter().map(|&i| t.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        let ng = self.ng(table);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                index: index.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse-mode sweep from a scalar `root`.
    ///
    /// A tape can be swept once; record new ops (or clear it) before sweeping again.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(AibError::Contract("backward: root is not on this tape".into()));
        }
        if !self.nodes[root.0].value.is_scalar() {
            return Err(AibError::Contract(format!(
                "backward: root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        if self.consumed {
            return Err(AibError::Contract(
                "backward: tape already swept; re-record before calling again".into(),
            ));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let factor = if self.fault == Some(node.op.kind()) { 1.5 } else { 1.0 };
            let mut sink = Sink {
                nodes: &self.nodes,
                grads: &mut grads,
                factor,
            };
            backward_rule(node, &g, &mut sink);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.needs_grad)
                    .map(|d| Tensor::new(node.value.shape(), d).expect("gradient shape matches value"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

struct Sink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
    factor: f64,
}

impl Sink<'_> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn slot(&mut self, v: Var) -> &mut [f64] {
        let len = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Adds `f(i)` to every element of the gradient of `v`.
    fn add_each(&mut self, v: Var, f: impl Fn(usize) -> f64) {
        if !self.wants(v) {
            return;
        }
        let factor = self.factor;
        for (i, slot) in self.slot(v).iter_mut().enumerate() {
            *slot += factor * f(i);
        }
    }

    fn add_vec(&mut self, v: Var, contribution: &[f64]) {
        self.add_each(v, |i| contribution[i]);
    }

    fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }
}

fn backward_rule(node: &Node, g: &[f64], sink: &mut Sink<'_>) {
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            sink.add_vec(*a, g);
            sink.add_vec(*b, g);
        }
        Op::Sub(a, b) => {
            sink.add_vec(*a, g);
            sink.add_each(*b, |i| -g[i]);
        }
        Op::Mul(a, b) => {
            let (va, vb) = (sink.value(*a).to_vec(), sink.value(*b).to_vec());
            sink.add_each(*a, |i| g[i] * vb[i]);
            sink.add_each(*b, |i| g[i] * va[i]);
        }
        Op::Scale(a, c) => sink.add_each(*a, |i| c * g[i]),
        Op::AddScalar(a) => sink.add_vec(*a, g),
        Op::Relu(a) => {
            let x = sink.value(*a).to_vec();
            sink.add_each(*a, |i| if x[i] > 0.0 { g[i] } else { 0.0 });
        }
        Op::Sigmoid(a) => sink.add_each(*a, |i| g[i] * out[i] * (1.0 - out[i])),
        Op::Softplus(a) => {
            let x = sink.value(*a).to_vec();
            sink.add_each(*a, |i| g[i] * sigmoid(x[i]));
        }
        Op::Ln(a) => {
            let x = sink.value(*a).to_vec();
            sink.add_each(*a, |i| g[i] / x[i]);
        }
        Op::Square(a) => {
            let x = sink.value(*a).to_vec();
            sink.add_each(*a, |i| 2.0 * x[i] * g[i]);
        }
        Op::Sum(a) => sink.add_each(*a, |_| g[0]),
        Op::Mean(a) => {
            let n = sink.value(*a).len() as f64;
            sink.add_each(*a, |_| g[0] / n);
        }
        Op::Reshape(a) | Op::StraightThrough(a) => sink.add_vec(*a, g),
        Op::Linear { input, weight, bias } => {
            let x = sink.nodes[input.0].value.shape().to_vec();
            let (n, d) = (x[0], x[1]);
            let m = g.len() / n;
            if sink.wants(*input) {
                let mut dx = vec![0.0; n * d];
                kernels::gemm(n, m, d, 1.0, g, (m, 1), sink.value(*weight), (1, m), 0.0, &mut dx);
                sink.add_vec(*input, &dx);
            }
            if sink.wants(*weight) {
                let mut dw = vec![0.0; d * m];
                kernels::gemm(d, n, m, 1.0, sink.value(*input), (1, d), g, (m, 1), 0.0, &mut dw);
                sink.add_vec(*weight, &dw);
            }
            if sink.wants(*bias) {
                let mut db = vec![0.0; m];
                for row in g.chunks(m) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                sink.add_vec(*bias, &db);
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            geometry,
        } => {
            let grads = kernels::conv2d_backward(geometry, sink.value(*input), sink.value(*weight), g);
            sink.add_vec(*input, &grads.input);
            sink.add_vec(*weight, &grads.weight);
            sink.add_vec(*bias, &grads.bias);
        }
        Op::MaxPool2d { input, argmax } => {
            if sink.wants(*input) {
                let factor = sink.factor;
                let slot = sink.slot(*input);
                for (o, &src) in argmax.iter().enumerate() {
                    slot[src] += factor * g[o];
                }
            }
        }
        Op::ChannelMul { features, mask } => {
            let fs = sink.nodes[features.0].value.shape().to_vec();
            let (channels, plane) = (fs[1], fs[2] * fs[3]);
            let (fv, mv) = (sink.value(*features).to_vec(), sink.value(*mask).to_vec());
            sink.add_each(*features, |i| {
                let n = i / (channels * plane);
                g[i] * mv[n * plane + i % plane]
            });
            sink.add_each(*mask, |j| {
                let (n, p) = (j / plane, j % plane);
                (0..channels)
                    .map(|c| {
                        let idx = (n * channels + c) * plane + p;
                        g[idx] * fv[idx]
                    })
                    .sum()
            });
        }
        Op::SliceCols { input, start } => {
            let d = sink.nodes[input.0].value.shape()[1];
            let len = out.len() / sink.nodes[input.0].value.shape()[0];
            let start = *start;
            sink.add_each(*input, |i| {
                let (r, c) = (i / d, i % d);
                if c >= start && c < start + len {
                    g[r * len + c - start]
                } else {
                    0.0
                }
            });
        }
        Op::SoftmaxCrossEntropy { logits, labels, probs } => {
            let n = labels.len();
            let c = probs.len() / n;
            let scale = g[0] / n as f64;
            sink.add_each(*logits, |i| {
                let (r, k) = (i / c, i % c);
                let target = if labels[r] == k { 1.0 } else { 0.0 };
                scale * (probs[i] - target)
            });
        }
        Op::Gather { table, index } => {
            if sink.wants(*table) {
                let factor = sink.factor;
                let slot = sink.slot(*table);
                for (o, &src) in index.iter().enumerate() {
                    slot[src] += factor * g[o];
                }
            }
        }
    }
}
