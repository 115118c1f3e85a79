//! Numerical kernels shared by the tape and the eager executor.
//!
//! Every reduction accumulates in a fixed sequential order starting from
//! `0.0`, so results are bit-reproducible and match naive reference loops
//! that sum in the same index order.

use super::{broadcast_shape, Tensor};
use crate::error::{Error, Result};

/// `C[m×n] = A[m×k] · B[k×n]`.
///
/// Loop order i-k-j; each output element accumulates over `k` in increasing
/// order. Zero entries of `A` are skipped, which leaves every finite result
/// bit-identical while making sparse inputs (one-hot rows, ReLU outputs,
/// blank pixels) cheap.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// `C[k×n] = Aᵀ · G` for `A[m×k]`, `G[m×n]`; accumulates over `m` in order.
pub fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, gv) in c_row.iter_mut().zip(g_row) {
                *cv += aip * gv;
            }
        }
    }
    c
}

/// `C[m×k] = G · Bᵀ` for `G[m×n]`, `B[k×n]`; accumulates over `n` in order.
pub fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let bt = transpose(b, k, n);
    matmul(g, &bt, m, n, k)
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// How an operand maps onto a broadcast output.
enum Bcast {
    Same,
    Scalar,
    /// Operand equals the trailing dimensions of the output.
    Trailing(usize),
    General(Vec<usize>),
}

fn classify(out: &[usize], operand: &[usize]) -> Bcast {
    let numel: usize = operand.iter().product();
    if operand == out {
        return Bcast::Same;
    }
    if numel == 1 {
        return Bcast::Scalar;
    }
    let trimmed: Vec<usize> = operand.iter().copied().skip_while(|&d| d == 1).collect();
    if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
        return Bcast::Trailing(numel);
    }
    Bcast::General(index_map(out, operand))
}

fn index_map(out: &[usize], operand: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - operand.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..operand.len()).rev() {
        if operand[i] != 1 {
            strides[i + offset] = s;
        }
        s *= operand[i];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

fn gather(b: &Bcast, data: &[f64], j: usize) -> f64 {
    match b {
        Bcast::Same => data[j],
        Bcast::Scalar => data[0],
        Bcast::Trailing(n) => data[j % n],
        Bcast::General(map) => data[map[j]],
    }
}

/// Elementwise binary op with right-aligned broadcasting.
pub fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let shape = broadcast_shape(a.shape(), b.shape()).map_err(|_| {
        Error::dim(
            op,
            format!("shapes {:?} and {:?} do not broadcast", a.shape(), b.shape()),
        )
    })?;
    let ma = classify(&shape, a.shape());
    let mb = classify(&shape, b.shape());
    let total: usize = shape.iter().product();
    let data = match (&ma, &mb) {
        (Bcast::Same, Bcast::Same) => a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
        _ => (0..total)
            .map(|j| f(gather(&ma, a.data(), j), gather(&mb, b.data(), j)))
            .collect(),
    };
    Ok(Tensor::from_parts(shape, data))
}

/// Sums a gradient of the broadcast output shape back onto `target` shape,
/// visiting output elements in row-major order.
pub fn reduce_to_shape(grad: &[f64], out_shape: &[usize], target: &[usize]) -> Vec<f64> {
    let numel: usize = target.iter().product();
    match classify(out_shape, target) {
        Bcast::Same => grad.to_vec(),
        Bcast::Scalar => vec![grad.iter().sum()],
        Bcast::Trailing(n) => {
            let mut acc = vec![0.0; n];
            for row in grad.chunks(n) {
                for (a, g) in acc.iter_mut().zip(row) {
                    *a += g;
                }
            }
            acc
        }
        Bcast::General(map) => {
            let mut acc = vec![0.0; numel];
            for (g, &m) in grad.iter().zip(&map) {
                acc[m] += g;
            }
            acc
        }
    }
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::dim(
                "conv2d",
                format!("expected N×C×H×W input and F×C×kH×kW kernel, got {input:?} and {kernel:?}"),
            ));
        }
        if input[1] != kernel[1] {
            return Err(Error::dim(
                "conv2d",
                format!("input has {} channels, kernel expects {}", input[1], kernel[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be at least 1"));
        }
        let (h, w, kh, kw) = (input[2], input[3], kernel[2], kernel[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}×{kw} larger than padded input {}×{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        Ok(ConvGeometry {
            batch: input[0],
            channels: input[1],
            height: h,
            width: w,
            filters: kernel[0],
            kernel_h: kh,
            kernel_w: kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.filters, self.out_h, self.out_w]
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if it
    /// falls inside the unpadded input.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = o * self.stride + k;
        if pos < self.pad || pos - self.pad >= limit {
            None
        } else {
            Some(pos - self.pad)
        }
    }
}

/// Direct cross-correlation; each output sums over (c, ky, kx) in order.
pub fn conv2d(input: &[f64], kernel: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.filters * g.out_h * g.out_w];
    let (ch, h, w, kh, kw) = (g.channels, g.height, g.width, g.kernel_h, g.kernel_w);
    for n in 0..g.batch {
        for f in 0..g.filters {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0.0;
                    for c in 0..ch {
                        for ky in 0..kh {
                            let Some(iy) = g.src(oy, ky, h) else { continue };
                            for kx in 0..kw {
                                let Some(ix) = g.src(ox, kx, w) else { continue };
                                acc += input[((n * ch + c) * h + iy) * w + ix]
                                    * kernel[((f * ch + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((n * g.filters + f) * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    g: &ConvGeometry,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (ch, h, w, kh, kw) = (g.channels, g.height, g.width, g.kernel_h, g.kernel_w);
    let mut d_in = want_input.then(|| vec![0.0; input.len()]);
    let mut d_k = want_kernel.then(|| vec![0.0; kernel.len()]);
    for n in 0..g.batch {
        for f in 0..g.filters {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let go = grad_out[((n * g.filters + f) * g.out_h + oy) * g.out_w + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for c in 0..ch {
                        for ky in 0..kh {
                            let Some(iy) = g.src(oy, ky, h) else { continue };
                            for kx in 0..kw {
                                let Some(ix) = g.src(ox, kx, w) else { continue };
                                let ii = ((n * ch + c) * h + iy) * w + ix;
                                let ki = ((f * ch + c) * kh + ky) * kw + kx;
                                if let Some(d) = d_in.as_mut() {
                                    d[ii] += go * kernel[ki];
                                }
                                if let Some(d) = d_k.as_mut() {
                                    d[ki] += go * input[ii];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (d_in, d_k)
}

/// Non-overlapping max pooling over `size×size` windows (trailing rows and
/// columns that do not fill a window are dropped). Returns the output and
/// the flat input index of each maximum; the first maximum wins ties.
pub fn max_pool2d(input: &[f64], shape: &[usize], size: usize) -> (Vec<usize>, Vec<f64>, Vec<usize>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if input[idx] > input[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (vec![n, c, oh, ow], out, arg)
}

/// Numerically stabilised per-row `-log softmax(z)[target]` and the row
/// probabilities.
pub fn softmax_cross_entropy(logits: &[f64], rows: usize, cols: usize, targets: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut losses = Vec::with_capacity(rows);
    let mut probs = vec![0.0; rows * cols];
    for r in 0..rows {
        let z = &logits[r * cols..(r + 1) * cols];
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let p = &mut probs[r * cols..(r + 1) * cols];
        let mut total = 0.0;
        for (pj, zj) in p.iter_mut().zip(z) {
            *pj = (zj - max).exp();
            total += *pj;
        }
        for pj in p.iter_mut() {
            *pj /= total;
        }
        losses.push(total.ln() + max - z[targets[r]]);
    }
    (losses, probs)
}
