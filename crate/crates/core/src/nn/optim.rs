use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learning rate as a function of the number of steps already taken.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    #[default]
    Constant,
    /// `(step, rate)` pairs: from `step` on, the rate is `rate`.
    Piecewise { drops: Vec<(u64, f64)> },
    /// `lr / (1 + k / tau)`.
    InverseTime { tau: f64 },
}

impl Schedule {
    pub fn rate(&self, base: f64, step: u64) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Piecewise { drops } => drops
                .iter()
                .take_while(|(s, _)| *s <= step)
                .last()
                .map_or(base, |(_, r)| *r),
            Schedule::InverseTime { tau } => base / (1.0 + step as f64 / tau),
        }
    }

    fn validate(&self, field: &str) -> Result<()> {
        match self {
            Schedule::Constant => Ok(()),
            Schedule::Piecewise { drops } => {
                if drops.windows(2).any(|w| w[0].0 >= w[1].0) {
                    return Err(Error::config(field, "piecewise steps must be strictly increasing"));
                }
                if drops.iter().any(|(_, r)| !(r.is_finite() && *r >= 0.0)) {
                    return Err(Error::config(field, "piecewise rates must be finite and non-negative"));
                }
                Ok(())
            }
            Schedule::InverseTime { tau } => {
                if !(tau.is_finite() && *tau > 0.0) {
                    return Err(Error::config(field, "tau must be positive"));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    Sgd,
    Adam,
}

/// Optimizer hyperparameters. `momentum` applies to SGD, the betas and
/// `eps` to Adam. Weight decay is added to the gradient before the update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: Schedule,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimConfig {
    /// SGD with momentum 0.9 and weight decay 5e-4.
    pub fn main_default(lr: f64) -> Self {
        OptimConfig {
            kind: OptimKind::Sgd,
            lr,
            momentum: 0.9,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 5e-4,
            schedule: Schedule::Constant,
        }
    }

    /// Adam at a fixed rate of 1e-4, no weight decay.
    pub fn critic_default() -> Self {
        OptimConfig {
            kind: OptimKind::Adam,
            lr: 1e-4,
            momentum: default_momentum(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
            schedule: Schedule::Constant,
        }
    }

    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimConfig {
            momentum,
            weight_decay,
            ..Self::main_default(lr)
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimConfig {
            lr,
            ..Self::critic_default()
        }
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        let field = |f: &str| format!("{section}.{f}");
        let check = |ok: bool, f: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(field(f), msg))
            }
        };
        check(self.lr.is_finite() && self.lr >= 0.0, "lr", "must be finite and non-negative")?;
        check((0.0..1.0).contains(&self.momentum), "momentum", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&self.beta1), "beta1", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&self.beta2), "beta2", "must lie in [0, 1)")?;
        check(self.eps.is_finite() && self.eps > 0.0, "eps", "must be positive")?;
        check(
            self.weight_decay.is_finite() && self.weight_decay >= 0.0,
            "weight_decay",
            "must be finite and non-negative",
        )?;
        self.schedule.validate(&field("schedule"))
    }
}

/// Optimizer with one slot set per parameter tensor: a velocity for SGD,
/// first and second moments for Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    config: OptimConfig,
    steps: u64,
    slots: Vec<Tensor>,
}

impl Optimizer {
    pub fn new<'a>(config: OptimConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let per_param = match config.kind {
            OptimKind::Sgd => 1,
            OptimKind::Adam => 2,
        };
        let slots = params
            .into_iter()
            .flat_map(|p| std::iter::repeat_n(Tensor::zeros(p.shape()), per_param))
            .collect();
        Optimizer {
            config,
            steps: 0,
            slots,
        }
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn slots(&self) -> &[Tensor] {
        &self.slots
    }

    /// Learning rate the next step will use.
    pub fn current_rate(&self) -> f64 {
        self.config.schedule.rate(self.config.lr, self.steps)
    }

    /// Restores slot buffers and the step counter, e.g. from a checkpoint.
    pub fn restore(&mut self, steps: u64, slots: Vec<Tensor>) -> Result<()> {
        if slots.len() != self.slots.len()
            || slots.iter().zip(&self.slots).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::dim("optimizer", "restored slots do not match parameter shapes"));
        }
        self.steps = steps;
        self.slots = slots;
        Ok(())
    }

    /// Applies one update in place.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[Tensor]) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        let per_param = self.slots.len() / params.len().max(1);
        if params.len() != grads.len() || params.len() * per_param != self.slots.len() {
            return Err(Error::dim(
                "optimizer",
                format!(
                    "{} parameters, {} gradients, {} slots",
                    params.len(),
                    grads.len(),
                    self.slots.len()
                ),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::dim(
                    "optimizer",
                    format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
        }
        let lr = self.current_rate();
        self.steps += 1;
        let wd = self.config.weight_decay;
        match self.config.kind {
            OptimKind::Sgd => {
                let mu = self.config.momentum;
                for ((p, grad), v) in params.into_iter().zip(grads).zip(self.slots.iter_mut()) {
                    for ((w, gr), vel) in p.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
                        let g = gr + wd * *w;
                        *vel = mu * *vel + g;
                        *w -= lr * *vel;
                    }
                }
            }
            OptimKind::Adam => {
                let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
                let t = self.steps as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for ((p, grad), mv) in params.into_iter().zip(grads).zip(self.slots.chunks_mut(2)) {
                    let (m, v) = mv.split_at_mut(1);
                    for (((w, gr), m), v) in p
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(m[0].data_mut())
                        .zip(v[0].data_mut())
                    {
                        let g = gr + wd * *w;
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
