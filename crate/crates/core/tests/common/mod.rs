#![allow(dead_code)]

use lct_core::error::Result;
use lct_core::nn::loss::sequence_cross_entropy;
use lct_core::nn::{LayerSpec, Sequential};
use lct_core::tensor::{relative_error, Eager, Graph, Padding, Tape, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

pub fn all_bits<'a>(ts: impl IntoIterator<Item = &'a Tensor>) -> Vec<u64> {
    ts.into_iter().flat_map(bits).collect()
}

#[derive(Clone, Copy, Debug)]
pub enum PostOp {
    None,
    Tanh,
    Sigmoid,
    Scale(f64),
    /// Multiply by a broadcast trainable row vector.
    Gate,
    /// Subtract a broadcast trainable row vector.
    Shift,
}

#[derive(Clone, Copy, Debug)]
pub enum LossKind {
    CrossEntropy,
    L1,
    SumSquares,
}

/// A randomly drawn network, post-op and loss used to compare the tape
/// against central differences.
#[derive(Clone, Debug)]
pub struct GradCase {
    pub net: Sequential,
    pub extra: Option<Tensor>,
    pub xs: Vec<Tensor>,
    pub post: PostOp,
    pub loss: LossKind,
    pub targets: Vec<Vec<usize>>,
    pub l1_targets: Vec<Tensor>,
}

impl GradCase {
    /// Draws until every ReLU input, max-pool window and L1 residual sits
    /// at least `KINK_MARGIN` away from a point where the loss is not
    /// differentiable.
    pub fn random(seed: u64) -> GradCase {
        let mut r = rng(seed);
        loop {
            let c = GradCase::draw(&mut r);
            if c.kink_margin() >= KINK_MARGIN {
                return c;
            }
        }
    }

    fn draw(r: &mut ChaCha8Rng) -> GradCase {
        let batch = r.random_range(1..=3);
        let classes = r.random_range(2..=5);
        let (specs, in_shape, steps) = match r.random_range(0..4) {
            0 => {
                let d = r.random_range(1..=6);
                let h = r.random_range(1..=6);
                let mut s = vec![LayerSpec::Dense { inputs: d, units: h }];
                if r.random_bool(0.5) {
                    s.push(LayerSpec::Relu);
                }
                s.push(LayerSpec::Dense { inputs: h, units: classes });
                (s, vec![d], 1)
            }
            1 => {
                let c = r.random_range(1..=2);
                let size = r.random_range(4..=6);
                let f = r.random_range(1..=3);
                let kernel = r.random_range(1..=3);
                let stride = r.random_range(1..=2);
                let padding = if r.random_bool(0.5) { Padding::Same } else { Padding::Valid };
                let conv = LayerSpec::Conv2d {
                    in_channels: c,
                    filters: f,
                    kernel,
                    stride,
                    padding,
                };
                let mut s = vec![conv.clone(), LayerSpec::Relu];
                let mut shape = conv.output_shape(&[c, size, size]).unwrap();
                match r.random_range(0..3) {
                    0 if shape[1] >= 2 => s.push(LayerSpec::MaxPool2d { size: 2 }),
                    1 => s.push(LayerSpec::GlobalAvgPool),
                    _ => {}
                }
                for l in &s[2..] {
                    shape = l.output_shape(&shape).unwrap();
                }
                if shape.len() == 3 {
                    s.push(LayerSpec::Flatten);
                    shape = vec![shape.iter().product()];
                }
                s.push(LayerSpec::Dense {
                    inputs: shape[0],
                    units: classes,
                });
                (s, vec![c, size, size], 1)
            }
            2 => {
                let d = r.random_range(1..=4);
                let u = r.random_range(1..=4);
                let s = vec![
                    LayerSpec::Lstm { inputs: d, units: u },
                    LayerSpec::Dense { inputs: u, units: classes },
                ];
                (s, vec![d], r.random_range(1..=3))
            }
            _ => {
                let d = r.random_range(2..=5);
                let u = r.random_range(1..=3);
                let s = vec![
                    LayerSpec::Lstm { inputs: d, units: u },
                    LayerSpec::Lstm { inputs: u, units: u },
                    LayerSpec::Dense { inputs: u, units: classes },
                ];
                (s, vec![d], r.random_range(1..=3))
            }
        };
        let net = Sequential::from_specs(&specs, r);
        let mut x_shape = vec![batch];
        x_shape.extend(&in_shape);
        let xs = (0..steps).map(|_| randn(&x_shape, r)).collect();
        let post = match r.random_range(0..6) {
            0 => PostOp::None,
            1 => PostOp::Tanh,
            2 => PostOp::Sigmoid,
            3 => PostOp::Scale(r.random_range(-2.0..2.0)),
            4 => PostOp::Gate,
            _ => PostOp::Shift,
        };
        let extra = matches!(post, PostOp::Gate | PostOp::Shift).then(|| randn(&[classes], r));
        let loss = match r.random_range(0..3) {
            0 => LossKind::CrossEntropy,
            1 => LossKind::L1,
            _ => LossKind::SumSquares,
        };
        let targets = (0..steps)
            .map(|_| (0..batch).map(|_| r.random_range(0..classes)).collect())
            .collect();
        let l1_targets = (0..steps).map(|_| randn(&[batch, classes], r)).collect();
        GradCase {
            net,
            extra,
            xs,
            post,
            loss,
            targets,
            l1_targets,
        }
    }

    /// Distance to the nearest kink of ReLU, max-pool or the L1 loss.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for (i, l) in self.net.layers.iter().enumerate() {
            let is_kink = matches!(l.spec, LayerSpec::Relu | LayerSpec::MaxPool2d { .. });
            if !is_kink {
                continue;
            }
            let prefix = Sequential::new(self.net.layers[..i].to_vec());
            let h = self.run(&prefix);
            for t in &h {
                margin = margin.min(match l.spec {
                    LayerSpec::Relu => t.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs())),
                    LayerSpec::MaxPool2d { size } => pool_gap(t, size),
                    _ => unreachable!(),
                });
            }
        }
        if let LossKind::L1 = self.loss {
            let mut g = Eager::new();
            let outs = self.run(&self.net);
            for (o, t) in outs.iter().zip(&self.l1_targets) {
                let o = self.apply_post(&mut g, o, self.extra.as_ref()).unwrap();
                for (a, b) in o.data().iter().zip(t.data()) {
                    margin = margin.min((a - b).abs());
                }
            }
        }
        margin
    }

    fn run(&self, net: &Sequential) -> Vec<Tensor> {
        let mut g = Eager::new();
        let bound = net.bind_constants(&mut g);
        let mut states = vec![None; net.layers.len()];
        net.forward(&mut g, &bound, self.xs.clone(), &mut states).unwrap()
    }

    fn apply_post<G: Graph>(&self, g: &mut G, o: &G::Node, extra: Option<&G::Node>) -> Result<G::Node> {
        match self.post {
            PostOp::None => Ok(o.clone()),
            PostOp::Tanh => g.tanh(o),
            PostOp::Sigmoid => g.sigmoid(o),
            PostOp::Scale(c) => g.scale(o, c),
            PostOp::Gate => g.mul(o, extra.unwrap()),
            PostOp::Shift => g.sub(o, extra.unwrap()),
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p: Vec<Tensor> = self.net.params().cloned().collect();
        p.extend(self.extra.clone());
        p
    }

    pub fn describe(&self) -> String {
        format!("{:?} + {:?} + {:?}, {} steps", self.net.specs(), self.post, self.loss, self.xs.len())
    }

    fn loss_on<G: Graph>(&self, g: &mut G, params: &[G::Node]) -> Result<G::Node> {
        let mut bound = Vec::new();
        let mut k = 0;
        for l in &self.net.layers {
            bound.push(params[k..k + l.params.len()].to_vec());
            k += l.params.len();
        }
        let extra = params.get(k);
        let xs = self.xs.iter().map(|x| g.constant(x.clone())).collect();
        let mut states = vec![None; self.net.layers.len()];
        let outs = self.net.forward(g, &bound, xs, &mut states)?;
        let mut post = Vec::new();
        for o in &outs {
            post.push(self.apply_post(g, o, extra)?);
        }
        match self.loss {
            LossKind::CrossEntropy => {
                let per = sequence_cross_entropy(g, &post, &self.targets)?;
                g.mean(&per)
            }
            LossKind::L1 => {
                let mut total: Option<G::Node> = None;
                for (o, t) in post.iter().zip(&self.l1_targets) {
                    let c = g.constant(t.clone());
                    let l = g.l1_loss(o, &c)?;
                    total = Some(match total {
                        None => l,
                        Some(acc) => g.add(&acc, &l)?,
                    });
                }
                Ok(total.unwrap())
            }
            LossKind::SumSquares => {
                let mut total: Option<G::Node> = None;
                for o in &post {
                    let sq = g.mul(o, o)?;
                    let l = g.sum(&sq)?;
                    total = Some(match total {
                        None => l,
                        Some(acc) => g.add(&acc, &l)?,
                    });
                }
                Ok(total.unwrap())
            }
        }
    }

    pub fn value(&self, params: &[Tensor]) -> Result<f64> {
        let mut g = Eager::new();
        let nodes = params.to_vec();
        self.loss_on(&mut g, &nodes)?.item()
    }

    pub fn analytic(&self, tape: &mut Tape) -> Result<Vec<Tensor>> {
        let params: Vec<_> = self.params().into_iter().map(|p| tape.param(p)).collect();
        let root = self.loss_on(tape, &params)?;
        tape.backward(root)?;
        Ok(params
            .iter()
            .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(&v).shape())))
            .collect())
    }

    /// Largest per-coordinate relative error between the tape and
    /// fourth-order central differences over every parameter.
    pub fn max_rel_err(&self, eps: f64, floor: f64) -> Result<f64> {
        let params = self.params();
        let analytic = self.analytic(&mut Tape::new())?;
        let mut worst = 0.0f64;
        for (b, p) in params.iter().enumerate() {
            let fd = five_point_grad(
                |x| {
                    let mut q = params.clone();
                    q[b] = x.clone();
                    self.value(&q)
                },
                p,
                eps,
            )?;
            for (a, n) in analytic[b].data().iter().zip(fd.data()) {
                worst = worst.max(relative_error(*a, *n, floor));
            }
        }
        Ok(worst)
    }
}

pub const KINK_MARGIN: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-4;
pub const FD_FLOOR: f64 = 1e-6;

/// Smallest gap between the largest and second largest entry of any
/// pooling window.
fn pool_gap(t: &Tensor, size: usize) -> f64 {
    let s = t.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut gap = f64::INFINITY;
    for b in 0..n * c {
        let plane = &t.data()[b * h * w..(b + 1) * h * w];
        for oy in 0..h / size {
            for ox in 0..w / size {
                let mut vals: Vec<f64> = (0..size * size)
                    .map(|k| plane[(oy * size + k / size) * w + ox * size + k % size])
                    .collect();
                vals.sort_by(|a, b| b.total_cmp(a));
                gap = gap.min(vals[0] - vals[1]);
            }
        }
    }
    gap
}

/// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h` per coordinate.
pub fn five_point_grad(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for j in 0..x.data().len() {
        let x0 = x.data()[j];
        let mut at = |d: f64| -> Result<f64> {
            probe.data_mut()[j] = x0 + d;
            f(&probe)
        };
        let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
        probe.data_mut()[j] = x0;
        grad.data_mut()[j] = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h);
    }
    Ok(grad)
}

/// Plain-loop backpropagation for a dense/ReLU stack with mean softmax
/// cross-entropy and SGD with momentum and coupled weight decay. Shares no
/// code with the library; sums run in the same index order so results can
/// be compared bit for bit.
#[derive(Clone, Debug)]
pub struct RefMlp {
    pub dims: Vec<usize>,
    /// Row-major `d_in × d_out` weights, then biases, per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    vel_w: Vec<Vec<f64>>,
    vel_b: Vec<Vec<f64>>,
}

impl RefMlp {
    /// Copies the parameters of a `[flatten,] dense, relu, ..., dense` stack.
    pub fn from_sequential(net: &Sequential) -> RefMlp {
        let mut dims = Vec::new();
        let (mut weights, mut biases) = (Vec::new(), Vec::new());
        for l in &net.layers {
            if let LayerSpec::Dense { inputs, units } = l.spec {
                if dims.is_empty() {
                    dims.push(inputs);
                }
                dims.push(units);
                weights.push(l.params[0].data().to_vec());
                biases.push(l.params[1].data().to_vec());
            }
        }
        let vel_w = weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let vel_b = biases.iter().map(|b| vec![0.0; b.len()]).collect();
        RefMlp {
            dims,
            weights,
            biases,
            vel_w,
            vel_b,
        }
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w);
            out.extend(b);
        }
        out
    }

    /// One SGD step on a batch; returns the mean loss.
    pub fn step(&mut self, x: &[f64], y: &[usize], lr: f64, mu: f64, wd: f64) -> f64 {
        let rows = y.len();
        let layers = self.weights.len();
        let mut acts = vec![x.to_vec()];
        let mut pre = Vec::new();
        for l in 0..layers {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let a = acts.last().unwrap();
            let mut z = vec![0.0; rows * dout];
            for i in 0..rows {
                for j in 0..dout {
                    let mut s = 0.0;
                    for k in 0..din {
                        s += a[i * din + k] * self.weights[l][k * dout + j];
                    }
                    z[i * dout + j] = s + self.biases[l][j];
                }
            }
            if l + 1 < layers {
                acts.push(z.iter().map(|v| v.max(0.0)).collect());
            }
            pre.push(z);
        }
        let k = *self.dims.last().unwrap();
        let logits = pre.last().unwrap();
        let mut losses = Vec::with_capacity(rows);
        let mut delta = vec![0.0; rows * k];
        let g = 1.0 / rows as f64;
        for r in 0..rows {
            let z = &logits[r * k..(r + 1) * k];
            let mut max = f64::NEG_INFINITY;
            for v in z {
                max = max.max(*v);
            }
            let mut p: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let mut total = 0.0;
            for e in &p {
                total += e;
            }
            for e in p.iter_mut() {
                *e /= total;
            }
            losses.push(total.ln() + max - z[y[r]]);
            for j in 0..k {
                let t = if j == y[r] { 1.0 } else { 0.0 };
                delta[r * k + j] = g * (p[j] - t);
            }
        }
        let mut loss_sum = 0.0;
        for v in &losses {
            loss_sum += v;
        }
        for l in (0..layers).rev() {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let a = &acts[l];
            let mut gw = vec![0.0; din * dout];
            for p in 0..din {
                for j in 0..dout {
                    let mut s = 0.0;
                    for i in 0..rows {
                        s += a[i * din + p] * delta[i * dout + j];
                    }
                    gw[p * dout + j] = s;
                }
            }
            let mut gb = vec![0.0; dout];
            for j in 0..dout {
                let mut s = 0.0;
                for i in 0..rows {
                    s += delta[i * dout + j];
                }
                gb[j] = s;
            }
            if l > 0 {
                let z = &pre[l - 1];
                let mut next = vec![0.0; rows * din];
                for i in 0..rows {
                    for p in 0..din {
                        let mut s = 0.0;
                        for j in 0..dout {
                            s += delta[i * dout + j] * self.weights[l][p * dout + j];
                        }
                        next[i * din + p] = if z[i * din + p] > 0.0 { s } else { 0.0 };
                    }
                }
                delta = next;
            }
            sgd(&mut self.weights[l], &gw, &mut self.vel_w[l], lr, mu, wd);
            sgd(&mut self.biases[l], &gb, &mut self.vel_b[l], lr, mu, wd);
        }
        loss_sum / rows as f64
    }
}

fn sgd(w: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, mu: f64, wd: f64) {
    for j in 0..w.len() {
        let d = g[j] + wd * w[j];
        v[j] = mu * v[j] + d;
        w[j] -= lr * v[j];
    }
}
