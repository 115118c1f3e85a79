use std::sync::Arc;

use super::model::{Architecture, PartitionedModel};
use super::stage::{HeadStat, Stage, Targets};
use crate::error::{Error, Result};
use crate::nn::OptimConfig;
use crate::tensor::Tensor;

/// One training batch: inputs and class targets per time step.
#[derive(Clone, Debug)]
pub struct StepInput {
    pub xs: Vec<Tensor>,
    pub targets: Targets,
}

impl StepInput {
    /// A feedforward batch (a single step).
    pub fn single(x: Tensor, y: Vec<usize>) -> Self {
        StepInput {
            xs: vec![x],
            targets: Arc::new(vec![y]),
        }
    }
}

/// Losses of every head for one batch; `heads[N-1]` is the main output.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub batch_id: u64,
    pub heads: Vec<HeadStat>,
    pub critic_losses: Vec<f64>,
}

pub(crate) fn worker_err(index: usize, batch_id: u64) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::Worker { .. } => e,
        other => Error::Worker {
            index,
            batch_id,
            source: Box::new(other),
        },
    }
}

/// Local critic training over a partitioned model.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub(crate) arch: Architecture,
    pub(crate) stages: Vec<Stage>,
    pub(crate) next_batch: u64,
}

impl Trainer {
    pub fn new(model: PartitionedModel, main_opt: &OptimConfig, critic_opt: &OptimConfig) -> Self {
        let steps = model.arch.bptt.unwrap_or(1);
        let mut critics = model.critics.into_iter();
        let n = model.groups.len();
        let stages = model
            .groups
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let c = if i + 1 < n { critics.next() } else { None };
                Stage::new(i, g, c, main_opt, critic_opt, steps)
            })
            .collect();
        Trainer {
            arch: model.arch,
            stages,
            next_batch: 0,
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn stages_mut(&mut self) -> &mut [Stage] {
        &mut self.stages
    }

    /// Batches trained so far.
    pub fn steps_done(&self) -> u64 {
        self.next_batch
    }

    pub fn set_steps_done(&mut self, steps: u64) {
        self.next_batch = steps;
    }

    pub fn set_check_finite(&mut self, on: bool) {
        self.stages.iter_mut().for_each(|s| s.set_check_finite(on));
    }

    pub fn reset_state(&mut self) {
        self.stages.iter_mut().for_each(Stage::reset_state);
    }

    /// Current parameters as a standalone model.
    pub fn snapshot(&self) -> PartitionedModel {
        PartitionedModel {
            arch: self.arch.clone(),
            groups: self.stages.iter().map(|s| s.group.clone()).collect(),
            critics: self.stages.iter().filter_map(|s| s.critic.clone()).collect(),
        }
    }

    /// One step in the deterministic order: every group forward and update
    /// front to back, then every critic against the next head's loss.
    pub fn step(&mut self, input: StepInput) -> Result<StepRecord> {
        let batch_id = self.next_batch;
        let mut outs = Vec::with_capacity(self.stages.len());
        let mut xs = input.xs;
        for stage in &mut self.stages {
            let out = stage
                .train_forward(batch_id, xs, &input.targets)
                .map_err(worker_err(stage.index, batch_id))?;
            xs = out.h.clone();
            outs.push(out);
        }
        let mut critic_losses = Vec::with_capacity(self.stages.len() - 1);
        for i in 0..self.stages.len() - 1 {
            let l = self.stages[i]
                .critic_update(batch_id, &outs[i + 1].losses)
                .map_err(worker_err(i, batch_id))?;
            critic_losses.push(l);
        }
        self.next_batch += 1;
        Ok(StepRecord {
            batch_id,
            heads: outs.iter().map(|o| o.stat).collect(),
            critic_losses,
        })
    }
}
