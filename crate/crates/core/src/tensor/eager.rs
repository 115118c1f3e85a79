use super::forward::{self, sigmoid};
use super::kernels;
use super::{Graph, Padding, Tensor};
use crate::error::{Error, Result};

/// Evaluates graph operations immediately without recording anything.
#[derive(Debug, Default)]
pub struct Eager {
    check_finite: bool,
}

impl Eager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn checked() -> Self {
        Eager { check_finite: true }
    }

    fn out(&self, op: &'static str, t: Tensor) -> Result<Tensor> {
        if self.check_finite && !t.is_finite() {
            return Err(Error::NonFinite { op: op.into() });
        }
        Ok(t)
    }
}

impl Graph for Eager {
    type Node = Tensor;

    fn constant(&mut self, value: Tensor) -> Tensor {
        value
    }

    fn param(&mut self, value: Tensor) -> Tensor {
        value
    }

    fn value<'a>(&'a self, node: &'a Tensor) -> &'a Tensor {
        node
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.out("matmul", forward::matmul(a, b)?)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.out("add", kernels::broadcast_binary("add", a, b, |x, y| x + y)?)
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.out("sub", kernels::broadcast_binary("sub", a, b, |x, y| x - y)?)
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.out("mul", kernels::broadcast_binary("mul", a, b, |x, y| x * y)?)
    }

    fn scale(&mut self, a: &Tensor, factor: f64) -> Result<Tensor> {
        self.out("scale", forward::map(a, |x| x * factor))
    }

    fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.out("relu", forward::map(a, |x| x.max(0.0)))
    }

    fn tanh(&mut self, a: &Tensor) -> Result<Tensor> {
        self.out("tanh", forward::map(a, f64::tanh))
    }

    fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        self.out("sigmoid", forward::map(a, sigmoid))
    }

    fn slice_cols(&mut self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        forward::slice_cols(a, start, len)
    }

    fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        forward::reshape(a, shape)
    }

    fn conv2d(&mut self, input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
        let (value, _) = forward::conv2d(input, kernel, stride, padding)?;
        self.out("conv2d", value)
    }

    fn max_pool2d(&mut self, input: &Tensor, size: usize) -> Result<Tensor> {
        Ok(forward::max_pool2d(input, size)?.0)
    }

    fn global_avg_pool(&mut self, input: &Tensor) -> Result<Tensor> {
        forward::global_avg_pool(input)
    }

    fn softmax_cross_entropy(&mut self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        let (value, _) = forward::softmax_cross_entropy(logits, targets)?;
        self.out("softmax_cross_entropy", value)
    }

    fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        self.out("sum", forward::sum(a))
    }

    fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        self.out("mean", forward::mean(a))
    }

    fn l1_loss(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        forward::l1_loss(a, b)
    }
}
