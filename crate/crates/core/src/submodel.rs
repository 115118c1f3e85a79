//! Early-exit sub-models `(f_1..f_i, c_i)`, their cost, and budgeted
//! selection among them.

use serde::{Deserialize, Serialize};

use crate::data::{CharStreams, ClassDataset};
use crate::engine::{one_hot, PartitionedModel};
use crate::error::{Error, Result};
use crate::nn::loss::{bits_per_char, correct_count};
use crate::nn::{LayerSpec, Sequential};
use crate::tensor::{Eager, Graph, Tensor};

/// Cost of one forward pass for one example at one time step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Complexity {
    pub flops: u64,
    pub params: u64,
    /// The critic head's own share of the totals.
    pub critic_flops: u64,
    pub critic_params: u64,
}

impl Complexity {
    pub fn critic_flops_pct(&self) -> f64 {
        pct(self.critic_flops, self.flops)
    }

    pub fn critic_params_pct(&self) -> f64 {
        pct(self.critic_params, self.params)
    }
}

fn pct(part: u64, whole: u64) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

/// FLOPs and parameters of a layer list applied to `input`, plus the
/// output shape.
pub fn count_layers(specs: &[LayerSpec], input: &[usize]) -> Result<(u64, u64, Vec<usize>)> {
    let mut shape = input.to_vec();
    let (mut flops, mut params) = (0, 0);
    for s in specs {
        flops += s.flops(&shape)?;
        params += s.param_count();
        shape = s.output_shape(&shape)?;
    }
    Ok((flops, params, shape))
}

/// An inference-only network made of the first `depth` groups followed by
/// critic `depth`, or by nothing when `depth` is the number of groups.
#[derive(Clone, Debug, PartialEq)]
pub struct SubModel {
    pub depth: usize,
    pub is_main: bool,
    pub net: Sequential,
    /// Trailing layers of `net` that belong to the critic.
    pub head_len: usize,
    pub input_shape: Vec<usize>,
    pub complexity: Complexity,
}

/// Copies out sub-model `depth` (1-based).
pub fn extract_submodel(model: &PartitionedModel, depth: usize) -> Result<SubModel> {
    let n = model.groups.len();
    if depth == 0 || depth > n {
        return Err(Error::contract(format!("sub-model depth {depth} outside 1..={n}")));
    }
    let mut layers: Vec<_> = model.groups[..depth].iter().flat_map(|g| g.layers.iter().cloned()).collect();
    let body: Vec<LayerSpec> = layers.iter().map(|l| l.spec.clone()).collect();
    let is_main = depth == n;
    let head: Vec<LayerSpec> = if is_main {
        Vec::new()
    } else {
        layers.extend(model.critics[depth - 1].layers.iter().cloned());
        model.critics[depth - 1].specs()
    };
    let input = &model.arch.input_shape;
    let (bf, bp, feat) = count_layers(&body, input)?;
    let (cf, cp, _) = count_layers(&head, &feat)?;
    Ok(SubModel {
        depth,
        is_main,
        net: Sequential::new(layers),
        head_len: head.len(),
        input_shape: input.clone(),
        complexity: Complexity {
            flops: bf + cf,
            params: bp + cp,
            critic_flops: cf,
            critic_params: cp,
        },
    })
}

/// Every head in depth order; the last is the main network.
pub fn all_submodels(model: &PartitionedModel) -> Result<Vec<SubModel>> {
    (1..=model.groups.len()).map(|d| extract_submodel(model, d)).collect()
}

/// FLOPs and parameters of `sub` for a given per-example input shape.
pub fn count_complexity(sub: &SubModel, input_shape: &[usize]) -> Result<Complexity> {
    if input_shape == sub.input_shape.as_slice() {
        return Ok(sub.complexity);
    }
    let specs = sub.net.specs();
    let split = specs.len() - sub.head_len;
    let (bf, bp, feat) = count_layers(&specs[..split], input_shape)?;
    let (cf, cp, _) = count_layers(&specs[split..], &feat)?;
    Ok(Complexity {
        flops: bf + cf,
        params: bp + cp,
        critic_flops: cf,
        critic_params: cp,
    })
}

/// Deepest sub-model whose FLOPs fit `budget` (inclusive).
pub fn anytime_select(subs: &[SubModel], budget: u64) -> Result<&SubModel> {
    let smallest = subs
        .iter()
        .map(|s| s.complexity.flops)
        .min()
        .ok_or_else(|| Error::contract("no sub-models to choose from"))?;
    subs.iter()
        .filter(|s| s.complexity.flops <= budget)
        .max_by_key(|s| s.depth)
        .ok_or(Error::NoFeasibleModel { budget, smallest })
}

/// Mean loss, accuracy and (for text) bits per character of one head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean cross-entropy per prediction in nats.
    pub loss: f64,
    pub accuracy: f64,
    pub bpc: Option<f64>,
    pub count: usize,
}

impl Evaluation {
    /// Accuracy for classifiers, BPC for text.
    pub fn headline(&self) -> f64 {
        self.bpc.unwrap_or(self.accuracy)
    }
}

/// Logits of a feedforward network for one batch.
pub fn predict(net: &Sequential, x: Tensor) -> Result<Tensor> {
    let mut out = crate::engine::run_eager(net, vec![x])?;
    Ok(out.pop().expect("one step"))
}

pub fn evaluate_classes(net: &Sequential, data: &ClassDataset, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = data.gather(chunk)?;
        let z = predict(net, b.x)?;
        let mut g = Eager::new();
        loss += g.softmax_cross_entropy(&z, &b.y)?.sum();
        correct += correct_count(&z, &b.y);
    }
    Ok(Evaluation {
        loss: loss / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        bpc: None,
        count: data.len(),
    })
}

/// Runs over all windows of `streams`, carrying recurrent state from one
/// window to the next.
pub fn evaluate_chars(net: &Sequential, streams: &CharStreams, vocab_width: usize) -> Result<Evaluation> {
    let mut g = Eager::new();
    let bound = net.bind(&mut g);
    let mut states = vec![None; net.layers.len()];
    let (mut loss, mut correct, mut count) = (0.0, 0usize, 0usize);
    for w in streams.iter() {
        let xs = w.inputs.iter().map(|ids| one_hot(ids, vocab_width)).collect::<Result<Vec<_>>>()?;
        let zs = net.forward(&mut g, &bound, xs, &mut states)?;
        for (z, y) in zs.iter().zip(&w.targets) {
            loss += g.softmax_cross_entropy(z, y)?.sum();
            correct += correct_count(z, y);
            count += y.len();
        }
    }
    if count == 0 {
        return Err(Error::contract("cannot evaluate on an empty corpus"));
    }
    let mean = loss / count as f64;
    Ok(Evaluation {
        loss: mean,
        accuracy: correct as f64 / count as f64,
        bpc: Some(bits_per_char(mean)),
        count,
    })
}
