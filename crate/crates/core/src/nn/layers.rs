use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Padding, Tensor};

/// One layer of a network, with the size parameters needed to build it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        units: usize,
    },
    Conv2d {
        in_channels: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    MaxPool2d {
        size: usize,
    },
    /// Spatial mean of an N×C×H×W input.
    GlobalAvgPool,
    Flatten,
    Relu,
    Lstm {
        inputs: usize,
        units: usize,
    },
}

impl LayerSpec {
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } | LayerSpec::Lstm { .. })
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(self, LayerSpec::Lstm { .. })
    }

    /// Shapes of this layer's parameter tensors.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, units } => vec![vec![inputs, units], vec![units]],
            LayerSpec::Conv2d {
                in_channels,
                filters,
                kernel,
                ..
            } => vec![vec![filters, in_channels, kernel, kernel], vec![filters, 1, 1]],
            LayerSpec::Lstm { inputs, units } => {
                vec![vec![inputs, 4 * units], vec![units, 4 * units], vec![4 * units]]
            }
            _ => vec![],
        }
    }

    pub fn param_count(&self) -> u64 {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>() as u64)
            .sum()
    }

    /// Per-example output shape for a per-example input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |want: &str| {
            Error::dim(
                "layer",
                format!("{self:?} expects {want}, got per-example shape {input:?}"),
            )
        };
        match *self {
            LayerSpec::Dense { inputs, units } | LayerSpec::Lstm { inputs, units } => {
                if input != [inputs] {
                    return Err(mismatch(&format!("[{inputs}]")));
                }
                Ok(vec![units])
            }
            LayerSpec::Conv2d {
                in_channels,
                filters,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(mismatch(&format!("[{in_channels}, H, W]")));
                }
                let pad = padding.amount(kernel);
                if stride == 0 || kernel > input[1] + 2 * pad || kernel > input[2] + 2 * pad {
                    return Err(mismatch("a spatial extent covering the kernel"));
                }
                Ok(vec![
                    filters,
                    (input[1] + 2 * pad - kernel) / stride + 1,
                    (input[2] + 2 * pad - kernel) / stride + 1,
                ])
            }
            LayerSpec::MaxPool2d { size } => {
                if input.len() != 3 || size == 0 || input[1] < size || input[2] < size {
                    return Err(mismatch("[C, H, W] with H, W ≥ window"));
                }
                Ok(vec![input[0], input[1] / size, input[2] / size])
            }
            LayerSpec::GlobalAvgPool => {
                if input.len() != 3 {
                    return Err(mismatch("[C, H, W]"));
                }
                Ok(vec![input[0]])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Relu => Ok(input.to_vec()),
        }
    }

    /// Forward FLOPs for one example at one time step. A multiply-accumulate
    /// counts as 2; bias adds ride along with the MACs; ReLU and reshapes are
    /// free; pooling costs 1 per input element; the LSTM cell update costs 4
    /// per unit (two products, one sum, one output product).
    pub fn flops(&self, input: &[usize]) -> Result<u64> {
        let out = self.output_shape(input)?;
        let numel = |s: &[usize]| s.iter().product::<usize>() as u64;
        Ok(match *self {
            LayerSpec::Dense { inputs, units } => 2 * (inputs * units) as u64,
            LayerSpec::Conv2d {
                in_channels, kernel, ..
            } => 2 * numel(&out) * (in_channels * kernel * kernel) as u64,
            LayerSpec::Lstm { inputs, units } => {
                2 * (4 * units * (inputs + units)) as u64 + 4 * units as u64
            }
            LayerSpec::MaxPool2d { .. } | LayerSpec::GlobalAvgPool => numel(input),
            LayerSpec::Flatten | LayerSpec::Relu => 0,
        })
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> Vec<Tensor> {
        init::init_layer(self, rng)
    }
}

/// A layer together with its parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Tensor>,
}

/// Hidden and cell state of one LSTM layer, each `batch × units`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

/// Parameters of one LSTM layer as graph nodes, gates ordered `[i, f, g, o]`.
pub struct LstmParams<'a, N> {
    pub w_input: &'a N,
    pub w_hidden: &'a N,
    pub bias: &'a N,
}

/// One LSTM time step:
/// `i, f, o = σ(·)`, `g = tanh(·)`, `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
pub fn lstm_step<G: Graph>(
    g: &mut G,
    x: &G::Node,
    state: (&G::Node, &G::Node),
    params: &LstmParams<'_, G::Node>,
) -> Result<(G::Node, G::Node)> {
    let (h, c) = state;
    let units = g.value(params.w_hidden).shape()[0];
    let hs = g.value(h).shape();
    if hs.len() != 2 || hs[1] != units || g.value(c).shape() != hs {
        return Err(Error::dim(
            "lstm_step",
            format!(
                "state shapes {:?}/{:?} do not match {units} units",
                g.value(h).shape(),
                g.value(c).shape()
            ),
        ));
    }
    let xw = g.matmul(x, params.w_input)?;
    let hw = g.matmul(h, params.w_hidden)?;
    let pre = g.add(&xw, &hw)?;
    let gates = g.add(&pre, params.bias)?;
    let i_pre = g.slice_cols(&gates, 0, units)?;
    let f_pre = g.slice_cols(&gates, units, units)?;
    let g_pre = g.slice_cols(&gates, 2 * units, units)?;
    let o_pre = g.slice_cols(&gates, 3 * units, units)?;
    let i = g.sigmoid(&i_pre)?;
    let f = g.sigmoid(&f_pre)?;
    let cand = g.tanh(&g_pre)?;
    let o = g.sigmoid(&o_pre)?;
    let keep = g.mul(&f, c)?;
    let write = g.mul(&i, &cand)?;
    let c_next = g.add(&keep, &write)?;
    let squashed = g.tanh(&c_next)?;
    let h_next = g.mul(&o, &squashed)?;
    Ok((h_next, c_next))
}

/// Applies one layer to a sequence of per-step batches. Non-recurrent
/// layers act on each step independently; an LSTM unrolls over the steps
/// starting from `state` (zeros when absent) and returns its final state.
pub fn forward_layer<G: Graph>(
    g: &mut G,
    spec: &LayerSpec,
    params: &[G::Node],
    xs: Vec<G::Node>,
    state: Option<(G::Node, G::Node)>,
) -> Result<(Vec<G::Node>, Option<(G::Node, G::Node)>)> {
    let mut out = Vec::with_capacity(xs.len());
    match *spec {
        LayerSpec::Lstm { units, .. } => {
            let batch = match xs.first() {
                Some(x) => g.value(x).shape()[0],
                None => return Ok((out, state)),
            };
            let (mut h, mut c) = match state {
                Some(s) => s,
                None => (
                    g.constant(Tensor::zeros(&[batch, units])),
                    g.constant(Tensor::zeros(&[batch, units])),
                ),
            };
            let p = LstmParams {
                w_input: &params[0],
                w_hidden: &params[1],
                bias: &params[2],
            };
            for x in &xs {
                let (hn, cn) = lstm_step(g, x, (&h, &c), &p)?;
                out.push(hn.clone());
                h = hn;
                c = cn;
            }
            return Ok((out, Some((h, c))));
        }
        _ => {
            for x in &xs {
                out.push(forward_step(g, spec, params, x)?);
            }
        }
    }
    Ok((out, None))
}

fn forward_step<G: Graph>(g: &mut G, spec: &LayerSpec, params: &[G::Node], x: &G::Node) -> Result<G::Node> {
    match *spec {
        LayerSpec::Dense { .. } => dense_forward(g, x, &params[0], &params[1]),
        LayerSpec::Conv2d { stride, padding, .. } => {
            let y = g.conv2d(x, &params[0], stride, padding)?;
            g.add(&y, &params[1])
        }
        LayerSpec::MaxPool2d { size } => g.max_pool2d(x, size),
        LayerSpec::GlobalAvgPool => g.global_avg_pool(x),
        LayerSpec::Flatten => {
            let s = g.value(x).shape();
            let rest: usize = s[1..].iter().product();
            let shape = [s[0], rest];
            g.reshape(x, &shape)
        }
        LayerSpec::Relu => g.relu(x),
        LayerSpec::Lstm { .. } => unreachable!("recurrent layers are unrolled by forward_layer"),
    }
}

/// `x·W + b` with the bias broadcast over rows.
pub fn dense_forward<G: Graph>(g: &mut G, x: &G::Node, w: &G::Node, b: &G::Node) -> Result<G::Node> {
    let xw = g.matmul(x, w)?;
    g.add(&xw, b)
}

/// Ordered list of layers applied in sequence.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    pub fn from_specs(specs: &[LayerSpec], rng: &mut impl Rng) -> Self {
        Sequential {
            layers: specs
                .iter()
                .map(|s| Layer {
                    spec: s.clone(),
                    params: s.init_params(rng),
                })
                .collect(),
        }
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn is_recurrent(&self) -> bool {
        self.layers.iter().any(|l| l.spec.is_recurrent())
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn param_count(&self) -> u64 {
        self.layers.iter().map(|l| l.spec.param_count()).sum()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.layers
            .iter()
            .try_fold(input.to_vec(), |shape, l| l.spec.output_shape(&shape))
    }

    /// FLOPs of one forward pass for one example at one time step.
    pub fn flops(&self, input: &[usize]) -> Result<u64> {
        let mut shape = input.to_vec();
        let mut total = 0;
        for l in &self.layers {
            total += l.spec.flops(&shape)?;
            shape = l.spec.output_shape(&shape)?;
        }
        Ok(total)
    }

    /// Puts every parameter on the graph as a trainable leaf.
    pub fn bind<G: Graph>(&self, g: &mut G) -> Vec<Vec<G::Node>> {
        self.layers
            .iter()
            .map(|l| l.params.iter().map(|p| g.param(p.clone())).collect())
            .collect()
    }

    /// Puts every parameter on the graph as a constant.
    pub fn bind_constants<G: Graph>(&self, g: &mut G) -> Vec<Vec<G::Node>> {
        self.layers
            .iter()
            .map(|l| l.params.iter().map(|p| g.constant(p.clone())).collect())
            .collect()
    }

    /// Runs the stack over a sequence of steps. `states` holds one optional
    /// carried state per layer (only recurrent layers use it) and receives
    /// the final states.
    pub fn forward<G: Graph>(
        &self,
        g: &mut G,
        bound: &[Vec<G::Node>],
        mut xs: Vec<G::Node>,
        states: &mut [Option<(G::Node, G::Node)>],
    ) -> Result<Vec<G::Node>> {
        for (idx, layer) in self.layers.iter().enumerate() {
            let carried = states.get_mut(idx).and_then(Option::take);
            let (ys, next) = forward_layer(g, &layer.spec, &bound[idx], xs, carried)?;
            if let Some(slot) = states.get_mut(idx) {
                *slot = next;
            }
            xs = ys;
        }
        Ok(xs)
    }
}
