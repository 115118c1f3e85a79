use std::collections::VecDeque;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::loss::{correct_count, sequence_cross_entropy};
use crate::nn::{OptimConfig, Optimizer, Sequential};
use crate::tensor::{Graph, Tape, Tensor, Var};

/// Class targets per time step, shared by every stage of a batch.
pub type Targets = Arc<Vec<Vec<usize>>>;

/// Loss and accuracy of one head on one batch. `loss` is the batch mean
/// of per-example losses summed over `steps` time steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadStat {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
    pub steps: usize,
}

/// What a stage hands on after its forward/update.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    /// Output activations per step.
    pub h: Vec<Tensor>,
    /// Per-example loss of this stage's head.
    pub losses: Vec<f64>,
    pub stat: HeadStat,
}

#[derive(Clone, Debug)]
struct Pending {
    batch_id: u64,
    h: Vec<Tensor>,
    targets: Targets,
}

/// One layer group with its critic, optimizers and recurrent state: the
/// unit of work owned by one worker.
#[derive(Clone, Debug)]
pub struct Stage {
    pub index: usize,
    pub group: Sequential,
    pub critic: Option<Sequential>,
    pub group_opt: Optimizer,
    pub critic_opt: Option<Optimizer>,
    steps: usize,
    check_finite: bool,
    state: Vec<Option<(Tensor, Tensor)>>,
    pending: VecDeque<Pending>,
}

fn finite(value: f64, op: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { op: op.to_string() })
    }
}

fn collect_grads(tape: &mut Tape, bound: &[Vec<Var>]) -> Vec<Tensor> {
    bound
        .iter()
        .flatten()
        .map(|&v| {
            tape.take_grad(v)
                .unwrap_or_else(|| Tensor::zeros(tape.value(&v).shape()))
        })
        .collect()
}

impl Stage {
    pub fn new(
        index: usize,
        group: Sequential,
        critic: Option<Sequential>,
        main_opt: &OptimConfig,
        critic_opt: &OptimConfig,
        steps: usize,
    ) -> Self {
        let group_opt = Optimizer::new(main_opt.clone(), group.params());
        let critic_opt = critic.as_ref().map(|c| Optimizer::new(critic_opt.clone(), c.params()));
        let layers = group.layers.len();
        Stage {
            index,
            group,
            critic,
            group_opt,
            critic_opt,
            steps,
            check_finite: false,
            state: vec![None; layers],
            pending: VecDeque::new(),
        }
    }

    /// Records every op on a checked tape, failing on the first NaN/Inf.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Forgets carried recurrent state.
    pub fn reset_state(&mut self) {
        self.state.iter_mut().for_each(|s| *s = None);
    }

    pub fn has_state(&self) -> bool {
        self.state.iter().any(Option::is_some)
    }

    /// Batches awaiting their downstream loss.
    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    fn tape(&self) -> Tape {
        if self.check_finite {
            Tape::checked()
        } else {
            Tape::new()
        }
    }

    /// Runs the group and its head on a fresh tape, updates the group from
    /// the head's mean loss and returns the activations for the next stage.
    /// The critic is read, not trained; the activations are buffered until
    /// the matching downstream loss arrives.
    pub fn train_forward(&mut self, batch_id: u64, xs: Vec<Tensor>, targets: &Targets) -> Result<ForwardOut> {
        if xs.len() != self.steps || targets.len() != self.steps {
            return Err(Error::contract(format!(
                "expected {} time steps, got {} inputs and {} target steps",
                self.steps,
                xs.len(),
                targets.len()
            )));
        }
        if xs[0].shape().first().copied().unwrap_or(0) == 0 {
            return Err(Error::contract("empty batch"));
        }
        let mut tape = self.tape();
        let inputs: Vec<Var> = xs.into_iter().map(|x| tape.constant(x)).collect();
        let bound = self.group.bind(&mut tape);
        let mut states: Vec<Option<(Var, Var)>> = self
            .state
            .iter()
            .map(|s| s.as_ref().map(|(h, c)| (tape.constant(h.clone()), tape.constant(c.clone()))))
            .collect();
        let hs = self.group.forward(&mut tape, &bound, inputs, &mut states)?;
        let logits = match &self.critic {
            Some(c) => {
                let cb = c.bind_constants(&mut tape);
                let mut cs = vec![None; c.layers.len()];
                c.forward(&mut tape, &cb, hs.clone(), &mut cs)?
            }
            None => hs.clone(),
        };
        let per = sequence_cross_entropy(&mut tape, &logits, targets)?;
        let mean = tape.mean(&per)?;
        let loss = finite(tape.value(&mean).item()?, "stage loss")?;
        let correct = logits
            .iter()
            .zip(targets.iter())
            .map(|(z, y)| correct_count(tape.value(z), y))
            .sum();
        let losses = tape.value(&per).data().to_vec();
        let count = losses.len() * self.steps;

        tape.backward(mean)?;
        let grads = collect_grads(&mut tape, &bound);
        self.group_opt.step(self.group.params_mut(), &grads)?;

        self.state = states
            .into_iter()
            .map(|s| s.map(|(h, c)| (tape.value(&h).clone(), tape.value(&c).clone())))
            .collect();
        let h: Vec<Tensor> = hs.iter().map(|v| tape.value(v).clone()).collect();
        if self.critic.is_some() {
            self.pending.push_back(Pending {
                batch_id,
                h: h.clone(),
                targets: targets.clone(),
            });
        }
        Ok(ForwardOut {
            h,
            losses,
            stat: HeadStat {
                loss,
                correct,
                count,
                steps: self.steps,
            },
        })
    }

    /// Trains the critic on the buffered batch `batch_id` against the
    /// downstream per-example loss. Returns the critic's L1 loss.
    pub fn critic_update(&mut self, batch_id: u64, l_next: &[f64]) -> Result<f64> {
        let p = self
            .pending
            .pop_front()
            .ok_or_else(|| Error::Pipeline(format!("stage {} has no batch awaiting a critic update", self.index)))?;
        if p.batch_id != batch_id {
            return Err(Error::Pipeline(format!(
                "stage {} expected the downstream loss of batch {}, got batch {batch_id}",
                self.index, p.batch_id
            )));
        }
        self.critic_step(p.h, &p.targets, l_next)
    }

    /// One critic step: `L1(L_i, L_next)` with `h` and `L_next` held
    /// constant, so only the critic's parameters move.
    pub fn critic_step(&mut self, h: Vec<Tensor>, targets: &[Vec<usize>], l_next: &[f64]) -> Result<f64> {
        let critic = self
            .critic
            .as_mut()
            .ok_or_else(|| Error::contract(format!("stage {} has no critic", self.index)))?;
        let batch = h.first().map_or(0, |t| t.shape()[0]);
        if l_next.len() != batch {
            return Err(Error::dim(
                "critic_update",
                format!("{} downstream losses for a batch of {batch}", l_next.len()),
            ));
        }
        let mut tape = if self.check_finite { Tape::checked() } else { Tape::new() };
        let inputs: Vec<Var> = h.into_iter().map(|x| tape.constant(x)).collect();
        let bound = critic.bind(&mut tape);
        let mut cs = vec![None; critic.layers.len()];
        let logits = critic.forward(&mut tape, &bound, inputs, &mut cs)?;
        let per = sequence_cross_entropy(&mut tape, &logits, targets)?;
        let target = tape.constant(Tensor::vector(l_next.to_vec()));
        let loss = tape.l1_loss(&per, &target)?;
        let value = finite(tape.value(&loss).item()?, "critic loss")?;
        tape.backward(loss)?;
        let grads = collect_grads(&mut tape, &bound);
        self.critic_opt
            .as_mut()
            .expect("critic has an optimizer")
            .step(critic.params_mut(), &grads)?;
        Ok(value)
    }
}
