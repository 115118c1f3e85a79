//! Checked forward computations used by both graph implementations.

use super::kernels::{self, ConvGeometry};
use super::{Padding, Tensor};
use crate::error::{Error, Result};

pub(super) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dim(
            "matmul",
            format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    Ok(Tensor::from_parts(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n)))
}

pub(super) fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|v| f(*v)).collect())
}

pub(super) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(super) fn slice_cols(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    if a.rank() != 2 || len == 0 || start + len > a.shape()[1] {
        return Err(Error::dim(
            "slice_cols",
            format!("columns {start}..{} out of range for {:?}", start + len, a.shape()),
        ));
    }
    let rows = a.shape()[0];
    let mut data = Vec::with_capacity(rows * len);
    for r in 0..rows {
        data.extend_from_slice(&a.row(r)[start..start + len]);
    }
    Ok(Tensor::from_parts(vec![rows, len], data))
}

pub(super) fn reshape(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    a.reshape(shape).map_err(|_| {
        Error::dim(
            "reshape",
            format!("cannot reshape {:?} into {shape:?}", a.shape()),
        )
    })
}

pub(super) fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<(Tensor, ConvGeometry)> {
    if kernel.rank() != 4 {
        return Err(Error::dim("conv2d", format!("kernel must be rank 4, got {:?}", kernel.shape())));
    }
    let pad = padding.amount(kernel.shape()[2].max(kernel.shape()[3]));
    let geom = ConvGeometry::new(input.shape(), kernel.shape(), stride, pad)?;
    let out = kernels::conv2d(input.data(), kernel.data(), &geom);
    Ok((Tensor::from_parts(geom.output_shape(), out), geom))
}

pub(super) fn max_pool2d(input: &Tensor, size: usize) -> Result<(Tensor, Vec<usize>)> {
    let s = input.shape();
    if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
        return Err(Error::dim(
            "max_pool2d",
            format!("window {size} does not fit input {s:?}"),
        ));
    }
    let (shape, out, arg) = kernels::max_pool2d(input.data(), s, size);
    Ok((Tensor::from_parts(shape, out), arg))
}

pub(super) fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::dim("global_avg_pool", format!("expected rank 4, got {s:?}")));
    }
    let area = s[2] * s[3];
    let data = input
        .data()
        .chunks(area)
        .map(|plane| plane.iter().sum::<f64>() / area as f64)
        .collect();
    Ok(Tensor::from_parts(vec![s[0], s[1]], data))
}

pub(super) fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(Tensor, Vec<f64>)> {
    if logits.rank() != 2 {
        return Err(Error::dim(
            "softmax_cross_entropy",
            format!("logits must be N×K, got {:?}", logits.shape()),
        ));
    }
    let (rows, cols) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != rows {
        return Err(Error::dim(
            "softmax_cross_entropy",
            format!("{rows} rows of logits but {} targets", targets.len()),
        ));
    }
    if let Some(bad) = targets.iter().find(|&&t| t >= cols) {
        return Err(Error::contract(format!(
            "target class {bad} out of range for {cols} classes"
        )));
    }
    let (losses, probs) = kernels::softmax_cross_entropy(logits.data(), rows, cols, targets);
    Ok((Tensor::from_parts(vec![rows], losses), probs))
}

pub(super) fn sum(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().sum())
}

pub(super) fn mean(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64)
}

pub(super) fn l1_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "l1_loss",
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    let total: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(Tensor::scalar(total / a.numel() as f64))
}
