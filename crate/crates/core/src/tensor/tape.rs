use std::fmt;
use std::sync::Arc;

use super::forward::{self, sigmoid};
use super::kernels::{self, ConvGeometry};
use super::{Graph, Padding, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Ids are assigned in recording order, so
/// every input of node `k` has an id below `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-defined op: given input values, the output value
/// and the output gradient, return one gradient per input.
pub type BackwardFn = Arc<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + Send + Sync>;

enum Op {
    Leaf,
    StopGradient,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    SliceCols { input: Var, start: usize },
    Reshape(Var),
    Conv2d { input: Var, kernel: Var, geom: ConvGeometry },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    Mean(Var),
    L1Loss(Var, Var),
    Custom { inputs: Vec<Var>, backward: BackwardFn },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::StopGradient => "stop_gradient",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::SliceCols { .. } => "slice_cols",
            Op::Reshape(_) => "reshape",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::L1Loss(..) => "l1_loss",
            Op::Custom { .. } => "custom",
        }
    }

    #[cfg(test)]
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::StopGradient => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::L1Loss(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Reshape(a)
            | Op::GlobalAvgPool(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::SliceCols { input, .. } | Op::MaxPool2d { input, .. } => vec![*input],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a straight-line computation.
///
/// Gradients from [`Tape::backward`] accumulate (`+=`) into per-node storage
/// across calls; use [`Tape::zero_grad`] to clear them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    check_finite: bool,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("check_finite", &self.check_finite)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that rejects any operation producing NaN or Inf.
    pub fn checked() -> Self {
        Tape {
            check_finite: true,
            ..Self::default()
        }
    }

    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(value, Op::Leaf, requires_grad)
    }

    /// Copies the value of `v` into a node that blocks gradient flow.
    pub fn stop_gradient(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push_node(value, Op::StopGradient, false)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated for `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Records an op with a caller-supplied backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Result<Var> {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            requires_grad,
        )
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op.name().into() });
        }
        Ok(self.push_node(value, op, requires_grad))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Reverse sweep from a scalar root. Seeds the root with 1 and adds the
    /// resulting gradient of every reachable node that requires grad into the
    /// tape's gradient storage.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = self
            .nodes
            .get(root.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::contract(format!("node {} is not on this tape", root.0)))?;
        if root_value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut work: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        work[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = work[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut work);
            let shape = node.value.shape().to_vec();
            match &mut self.grads[id] {
                Some(existing) => {
                    for (e, v) in existing.data_mut().iter_mut().zip(&g) {
                        *e += v;
                    }
                }
                slot => *slot = Some(Tensor::from_parts(shape, g)),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], work: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let want = |v: &Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, contribution: Vec<f64>| accumulate(&mut work[v.0], contribution);
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if want(a) {
                    send(*a, kernels::matmul_nt(g, bv.data(), m, n, k));
                }
                if want(b) {
                    send(*b, kernels::matmul_tn(av.data(), g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                if want(a) {
                    send(*a, kernels::reduce_to_shape(g, out.shape(), self.val(*a).shape()));
                }
                if want(b) {
                    send(*b, kernels::reduce_to_shape(g, out.shape(), self.val(*b).shape()));
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    send(*a, kernels::reduce_to_shape(g, out.shape(), self.val(*a).shape()));
                }
                if want(b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    send(*b, kernels::reduce_to_shape(&neg, out.shape(), self.val(*b).shape()));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if want(a) {
                    let bb = kernels::broadcast_binary("mul", bv, out, |x, _| x).expect("shape checked in forward");
                    let prod: Vec<f64> = g.iter().zip(bb.data()).map(|(g, y)| g * y).collect();
                    send(*a, kernels::reduce_to_shape(&prod, out.shape(), av.shape()));
                }
                if want(b) {
                    let aa = kernels::broadcast_binary("mul", av, out, |x, _| x).expect("shape checked in forward");
                    let prod: Vec<f64> = g.iter().zip(aa.data()).map(|(g, x)| g * x).collect();
                    send(*b, kernels::reduce_to_shape(&prod, out.shape(), bv.shape()));
                }
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|v| v * s).collect()),
            Op::Relu(a) => {
                let x = self.val(*a).data();
                send(*a, g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Tanh(a) => send(*a, g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect()),
            Op::Sigmoid(a) => send(*a, g.iter().zip(out.data()).map(|(g, y)| g * (y * (1.0 - y))).collect()),
            Op::SliceCols { input, start } => {
                let src = self.val(*input).shape();
                let (rows, cols, len) = (src[0], src[1], out.shape()[1]);
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                send(*input, d);
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Conv2d { input, kernel, geom } => {
                let (di, dk) = kernels::conv2d_backward(
                    self.val(*input).data(),
                    self.val(*kernel).data(),
                    g,
                    geom,
                    want(input),
                    want(kernel),
                );
                if let Some(di) = di {
                    send(*input, di);
                }
                if let Some(dk) = dk {
                    send(*kernel, dk);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let mut d = vec![0.0; self.val(*input).numel()];
                for (gv, &src) in g.iter().zip(argmax) {
                    d[src] += gv;
                }
                send(*input, d);
            }
            Op::GlobalAvgPool(a) => {
                let s = self.val(*a).shape();
                let area = s[2] * s[3];
                let d = g.iter().flat_map(|gv| std::iter::repeat_n(gv / area as f64, area)).collect();
                send(*a, d);
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let cols = self.val(*logits).shape()[1];
                let mut d = Vec::with_capacity(probs.len());
                for (r, row) in probs.chunks(cols).enumerate() {
                    for (j, p) in row.iter().enumerate() {
                        let y = if j == targets[r] { 1.0 } else { 0.0 };
                        d.push(g[r] * (p - y));
                    }
                }
                send(*logits, d);
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.val(*a).numel()]),
            Op::Mean(a) => {
                let n = self.val(*a).numel();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::L1Loss(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                let n = av.len() as f64;
                let signs: Vec<f64> = av.iter().zip(bv).map(|(x, y)| sign(x - y)).collect();
                if want(a) {
                    send(*a, signs.iter().map(|s| g[0] * s / n).collect());
                }
                if want(b) {
                    send(*b, signs.iter().map(|s| -(g[0] * s / n)).collect());
                }
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.val(*v)).collect();
                let grad = Tensor::from_parts(out.shape().to_vec(), g.to_vec());
                let grads = backward(&values, out, &grad);
                for (v, d) in inputs.iter().zip(grads) {
                    if want(v) {
                        send(*v, d.into_data());
                    }
                }
            }
        }
    }
}

/// Subgradient of |x|: zero at zero.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contribution) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

impl Graph for Tape {
    type Node = Var;

    fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn value<'a>(&'a self, node: &'a Var) -> &'a Tensor {
        &self.nodes[node.0].value
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = forward::matmul(self.val(*a), self.val(*b))?;
        self.push(value, Op::MatMul(*a, *b), self.rg(&[*a, *b]))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = kernels::broadcast_binary("add", self.val(*a), self.val(*b), |x, y| x + y)?;
        self.push(value, Op::Add(*a, *b), self.rg(&[*a, *b]))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = kernels::broadcast_binary("sub", self.val(*a), self.val(*b), |x, y| x - y)?;
        self.push(value, Op::Sub(*a, *b), self.rg(&[*a, *b]))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = kernels::broadcast_binary("mul", self.val(*a), self.val(*b), |x, y| x * y)?;
        self.push(value, Op::Mul(*a, *b), self.rg(&[*a, *b]))
    }

    fn scale(&mut self, a: &Var, factor: f64) -> Result<Var> {
        let value = forward::map(self.val(*a), |x| x * factor);
        self.push(value, Op::Scale(*a, factor), self.rg(&[*a]))
    }

    fn relu(&mut self, a: &Var) -> Result<Var> {
        let value = forward::map(self.val(*a), |x| x.max(0.0));
        self.push(value, Op::Relu(*a), self.rg(&[*a]))
    }

    fn tanh(&mut self, a: &Var) -> Result<Var> {
        let value = forward::map(self.val(*a), f64::tanh);
        self.push(value, Op::Tanh(*a), self.rg(&[*a]))
    }

    fn sigmoid(&mut self, a: &Var) -> Result<Var> {
        let value = forward::map(self.val(*a), sigmoid);
        self.push(value, Op::Sigmoid(*a), self.rg(&[*a]))
    }

    fn slice_cols(&mut self, a: &Var, start: usize, len: usize) -> Result<Var> {
        let value = forward::slice_cols(self.val(*a), start, len)?;
        self.push(value, Op::SliceCols { input: *a, start }, self.rg(&[*a]))
    }

    fn reshape(&mut self, a: &Var, shape: &[usize]) -> Result<Var> {
        let value = forward::reshape(self.val(*a), shape)?;
        self.push(value, Op::Reshape(*a), self.rg(&[*a]))
    }

    fn conv2d(&mut self, input: &Var, kernel: &Var, stride: usize, padding: Padding) -> Result<Var> {
        let (value, geom) = forward::conv2d(self.val(*input), self.val(*kernel), stride, padding)?;
        let rg = self.rg(&[*input, *kernel]);
        self.push(
            value,
            Op::Conv2d {
                input: *input,
                kernel: *kernel,
                geom,
            },
            rg,
        )
    }

    fn max_pool2d(&mut self, input: &Var, size: usize) -> Result<Var> {
        let (value, argmax) = forward::max_pool2d(self.val(*input), size)?;
        self.push(value, Op::MaxPool2d { input: *input, argmax }, self.rg(&[*input]))
    }

    fn global_avg_pool(&mut self, input: &Var) -> Result<Var> {
        let value = forward::global_avg_pool(self.val(*input))?;
        self.push(value, Op::GlobalAvgPool(*input), self.rg(&[*input]))
    }

    fn softmax_cross_entropy(&mut self, logits: &Var, targets: &[usize]) -> Result<Var> {
        let (value, probs) = forward::softmax_cross_entropy(self.val(*logits), targets)?;
        let rg = self.rg(&[*logits]);
        self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits: *logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    fn sum(&mut self, a: &Var) -> Result<Var> {
        let value = forward::sum(self.val(*a));
        self.push(value, Op::Sum(*a), self.rg(&[*a]))
    }

    fn mean(&mut self, a: &Var) -> Result<Var> {
        let value = forward::mean(self.val(*a));
        self.push(value, Op::Mean(*a), self.rg(&[*a]))
    }

    fn l1_loss(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = forward::l1_loss(self.val(*a), self.val(*b))?;
        self.push(value, Op::L1Loss(*a, *b), self.rg(&[*a, *b]))
    }
}
