//! Probes on a frozen model: the σ descent-direction ratio per group, the
//! gap between critic and main losses, the squared norm of the true
//! gradient, and finite-difference gradient checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{run_eager, PartitionedModel};
use crate::error::{Error, Result};
use crate::nn::loss::sequence_cross_entropy;
use crate::tensor::{relative_error, Graph, Tape, Tensor, Var};

/// Squared gradient norms below this make σ meaningless.
const DEGENERATE_NORM_SQ: f64 = 1e-24;

fn tape_mean_loss(tape: &mut Tape, logits: &[Var], targets: &[Vec<usize>]) -> Result<Var> {
    let per = sequence_cross_entropy(tape, logits, targets)?;
    tape.mean(&per)
}

fn grads_of(tape: &mut Tape, bound: &[Vec<Var>]) -> Vec<Tensor> {
    bound
        .iter()
        .flatten()
        .map(|&v| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(tape.value(&v).shape())))
        .collect()
}

/// Main loss and its gradient with respect to every group's parameters,
/// by backpropagation through the whole network.
pub fn true_gradients(model: &PartitionedModel, xs: &[Tensor], targets: &[Vec<usize>]) -> Result<(f64, Vec<Vec<Tensor>>)> {
    let mut tape = Tape::new();
    let mut h: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let mut bound = Vec::with_capacity(model.groups.len());
    for g in &model.groups {
        let b = g.bind(&mut tape);
        let mut states = vec![None; g.layers.len()];
        h = g.forward(&mut tape, &b, h, &mut states)?;
        bound.push(b);
    }
    let loss = tape_mean_loss(&mut tape, &h, targets)?;
    let value = tape.value(&loss).item()?;
    tape.backward(loss)?;
    let grads = bound.iter().map(|b| grads_of(&mut tape, b)).collect();
    Ok((value, grads))
}

/// Input of group `i` (0-based) and the gradient of critic `i`'s mean
/// loss with respect to group `i`'s parameters.
pub fn estimated_gradient(model: &PartitionedModel, i: usize, xs: &[Tensor], targets: &[Vec<usize>]) -> Result<(f64, Vec<Tensor>)> {
    let critic = model
        .critics
        .get(i)
        .ok_or_else(|| Error::contract(format!("group {} has no critic", i + 1)))?;
    let mut h_prev = xs.to_vec();
    for g in &model.groups[..i] {
        h_prev = run_eager(g, h_prev)?;
    }
    let mut tape = Tape::new();
    let inputs: Vec<Var> = h_prev.into_iter().map(|x| tape.constant(x)).collect();
    let group = &model.groups[i];
    let bound = group.bind(&mut tape);
    let mut states = vec![None; group.layers.len()];
    let h = group.forward(&mut tape, &bound, inputs, &mut states)?;
    let cb = critic.bind_constants(&mut tape);
    let mut cs = vec![None; critic.layers.len()];
    let z = critic.forward(&mut tape, &cb, h, &mut cs)?;
    let loss = tape_mean_loss(&mut tape, &z, targets)?;
    let value = tape.value(&loss).item()?;
    tape.backward(loss)?;
    Ok((value, grads_of(&mut tape, &bound)))
}

fn flat_dot(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn flat_norm_sq(a: &[Tensor]) -> f64 {
    a.iter().map(Tensor::squared_norm).sum()
}

/// `true · estimated / ‖true‖²`, or a degenerate-probe error when the
/// true gradient vanishes.
pub fn sigma(true_grad: &[Tensor], est_grad: &[Tensor]) -> Result<f64> {
    let denom = flat_norm_sq(true_grad);
    if denom < DEGENERATE_NORM_SQ {
        return Err(Error::DegenerateProbe(format!("true gradient norm² {denom:e} is too small")));
    }
    Ok(flat_dot(true_grad, est_grad) / denom)
}

/// σ for every group that has a critic. The last group is omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaReport {
    pub step: u64,
    pub batch_size: usize,
    /// `None` where the probe was degenerate.
    pub sigma: Vec<Option<f64>>,
}

impl SigmaReport {
    /// Groups whose σ is not positive.
    pub fn non_positive(&self) -> Vec<usize> {
        self.sigma
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_some_and(|v| v <= 0.0))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Everything one probe measures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub sigma: SigmaReport,
    /// Mean loss of each critic head, then of the main head.
    pub head_losses: Vec<f64>,
    /// `|L_i - L_N|` per critic.
    pub loss_gaps: Vec<f64>,
    pub grad_norm_sq: f64,
    /// Squared true-gradient norm per group.
    pub group_grad_norm_sq: Vec<f64>,
}

pub fn sigma_probe(model: &PartitionedModel, xs: &[Tensor], targets: &[Vec<usize>], step: u64) -> Result<SigmaReport> {
    Ok(probe(model, xs, targets, step)?.sigma)
}

/// σ per group, loss gaps and the true gradient norm on one batch.
pub fn probe(model: &PartitionedModel, xs: &[Tensor], targets: &[Vec<usize>], step: u64) -> Result<ProbeReport> {
    let (main_loss, true_grads) = true_gradients(model, xs, targets)?;
    let mut sigmas = Vec::with_capacity(model.critics.len());
    let mut head_losses = Vec::with_capacity(model.critics.len() + 1);
    for i in 0..model.critics.len() {
        let (li, est) = estimated_gradient(model, i, xs, targets)?;
        head_losses.push(li);
        sigmas.push(match sigma(&true_grads[i], &est) {
            Ok(s) => Some(s),
            Err(Error::DegenerateProbe(_)) => None,
            Err(e) => return Err(e),
        });
    }
    head_losses.push(main_loss);
    let group_grad_norm_sq: Vec<f64> = true_grads.iter().map(|g| flat_norm_sq(g)).collect();
    Ok(ProbeReport {
        sigma: SigmaReport {
            step,
            batch_size: xs.first().map_or(0, |x| x.shape()[0]),
            sigma: sigmas,
        },
        loss_gaps: head_losses[..head_losses.len() - 1]
            .iter()
            .map(|l| (l - main_loss).abs())
            .collect(),
        head_losses,
        grad_norm_sq: group_grad_norm_sq.iter().sum(),
        group_grad_norm_sq,
    })
}

/// `|mean L_i - mean L_N|` per critic, from forward passes only.
pub fn loss_gap(model: &PartitionedModel, xs: &[Tensor], targets: &[Vec<usize>]) -> Result<Vec<f64>> {
    let mut h = xs.to_vec();
    let mut critic_losses = Vec::with_capacity(model.critics.len());
    for (i, g) in model.groups.iter().enumerate() {
        h = run_eager(g, h)?;
        if i < model.critics.len() {
            critic_losses.push(model.critic_loss(i, h.clone(), targets)?.1);
        }
    }
    let mut eg = crate::tensor::Eager::new();
    let per = sequence_cross_entropy(&mut eg, &h, targets)?;
    let main = eg.mean(&per)?.item()?;
    Ok(critic_losses.iter().map(|l| (l - main).abs()).collect())
}

/// `‖∇L_N‖²` over all groups' parameters.
pub fn grad_norm_trace(model: &PartitionedModel, xs: &[Tensor], targets: &[Vec<usize>]) -> Result<f64> {
    let (_, grads) = true_gradients(model, xs, targets)?;
    Ok(grads.iter().map(|g| flat_norm_sq(g)).sum())
}

/// Outcome of checking one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub name: String,
    pub coords: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub blocks: Vec<BlockCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }
}

/// Gradients below this are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Compares analytic gradients against central differences on up to
/// `max_coords` randomly chosen coordinates of each parameter tensor.
/// `loss` evaluates the scalar objective at given parameters and
/// `analytic` returns its gradients there.
#[allow(clippy::too_many_arguments)]
pub fn grad_check_fn(
    names: &[String],
    params: &[Tensor],
    mut loss: impl FnMut(&[Tensor]) -> Result<f64>,
    analytic: &[Tensor],
    eps: f64,
    tol: f64,
    max_coords: usize,
    seed: u64,
) -> Result<Vec<BlockCheck>> {
    if eps <= 0.0 {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for (b, p) in params.iter().enumerate() {
        let n = p.numel();
        let picks = sample(&mut rng, n, max_coords.min(n)).into_vec();
        let mut worst = 0.0f64;
        for &j in &picks {
            let orig = p.data()[j];
            work[b].data_mut()[j] = orig + eps;
            let up = loss(&work)?;
            work[b].data_mut()[j] = orig - eps;
            let down = loss(&work)?;
            work[b].data_mut()[j] = orig;
            if !(up.is_finite() && down.is_finite()) {
                return Err(Error::NonFinite {
                    op: "finite difference".into(),
                });
            }
            let fd = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[b].data()[j], fd, GRAD_CHECK_FLOOR));
        }
        out.push(BlockCheck {
            name: names[b].clone(),
            coords: picks.len(),
            max_rel_err: worst,
            passed: worst < tol,
        });
    }
    Ok(out)
}

fn mono_loss(model: &PartitionedModel, xs: &[Tensor], targets: &[Vec<usize>]) -> Result<f64> {
    let logits = model.forward(xs.to_vec())?;
    let mut g = crate::tensor::Eager::new();
    let per = sequence_cross_entropy(&mut g, &logits, targets)?;
    g.mean(&per)?.item()
}

/// Checks backpropagated gradients of the main loss for every group
/// parameter and of each critic's loss for its own parameters.
pub fn grad_check(model: &PartitionedModel, xs: &[Tensor], targets: &[Vec<usize>], eps: f64, tol: f64, max_coords: usize, seed: u64) -> Result<GradCheckReport> {
    let mut blocks = Vec::new();
    let (_, true_grads) = true_gradients(model, xs, targets)?;
    for (gi, g) in model.groups.iter().enumerate() {
        let names: Vec<String> = param_names(&format!("group{}", gi + 1), g);
        let params: Vec<Tensor> = g.params().cloned().collect();
        let mut m = model.clone();
        let checks = grad_check_fn(
            &names,
            &params,
            |p| {
                for (dst, src) in m.groups[gi].params_mut().zip(p) {
                    dst.clone_from(src);
                }
                mono_loss(&m, xs, targets)
            },
            &true_grads[gi],
            eps,
            tol,
            max_coords,
            seed.wrapping_add(gi as u64),
        )?;
        blocks.extend(checks);
    }
    for (ci, c) in model.critics.iter().enumerate() {
        let mut h = xs.to_vec();
        for g in &model.groups[..=ci] {
            h = run_eager(g, h)?;
        }
        let mut tape = Tape::new();
        let inputs: Vec<Var> = h.iter().map(|x| tape.constant(x.clone())).collect();
        let bound = c.bind(&mut tape);
        let mut cs = vec![None; c.layers.len()];
        let z = c.forward(&mut tape, &bound, inputs, &mut cs)?;
        let loss = tape_mean_loss(&mut tape, &z, targets)?;
        tape.backward(loss)?;
        let analytic = grads_of(&mut tape, &bound);
        let names = param_names(&format!("critic{}", ci + 1), c);
        let params: Vec<Tensor> = c.params().cloned().collect();
        let mut critic = c.clone();
        let checks = grad_check_fn(
            &names,
            &params,
            |p| {
                for (dst, src) in critic.params_mut().zip(p) {
                    dst.clone_from(src);
                }
                let z = run_eager(&critic, h.clone())?;
                let mut g = crate::tensor::Eager::new();
                let per = sequence_cross_entropy(&mut g, &z, targets)?;
                g.mean(&per)?.item()
            },
            &analytic,
            eps,
            tol,
            max_coords,
            seed.wrapping_add(1000 + ci as u64),
        )?;
        blocks.extend(checks);
    }
    Ok(GradCheckReport { eps, tol, blocks })
}

fn param_names(prefix: &str, net: &crate::nn::Sequential) -> Vec<String> {
    let mut names = Vec::new();
    for (li, l) in net.layers.iter().enumerate() {
        for pi in 0..l.params.len() {
            names.push(format!("{prefix}.layer{li}.p{pi}"));
        }
    }
    names
}
