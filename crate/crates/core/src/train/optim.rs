//! SGD with momentum and Adam, plus learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Divide by `divisor` each time training passes `fraction * epochs`.
    StepAtFractions { fractions: Vec<f64>, divisor: f64 },
    /// Multiply by `factor` every `k_steps` minibatches.
    GeometricEvery { k_steps: u64, factor: f64 },
}

impl Schedule {
    /// Learning rate for `epoch` (0-based) of `total_epochs`, after `step`
    /// completed minibatches.
    pub fn lr(&self, base: f64, epoch: usize, total_epochs: usize, step: u64) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::StepAtFractions { fractions, divisor } => {
                let passed = fractions
                    .iter()
                    .filter(|&&f| epoch as f64 >= f * total_epochs as f64)
                    .count();
                base / divisor.powi(passed as i32)
            }
            Schedule::GeometricEvery { k_steps, factor } => {
                base * factor.powi((step / (*k_steps).max(1)) as i32)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
        schedule: Schedule,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
        schedule: Schedule,
    },
}

impl OptimizerConfig {
    /// lr 0.1, momentum 0.9, divided by 10 at 50% and 75% of training.
    pub fn full_sgd() -> Self {
        OptimizerConfig::Sgd {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: Schedule::StepAtFractions {
                fractions: vec![0.5, 0.75],
                divisor: 10.0,
            },
        }
    }

    /// lr 1e-3 decayed by 0.94 every 10000 minibatches.
    pub fn decayed_adam() -> Self {
        OptimizerConfig::Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            schedule: Schedule::GeometricEvery {
                k_steps: 10_000,
                factor: 0.94,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lr, wd) = match self {
            OptimizerConfig::Sgd {
                lr,
                momentum,
                weight_decay,
                ..
            } => {
                if !(0.0..1.0).contains(momentum) {
                    return Err(Error::InvalidArgument(format!("momentum {momentum} outside [0, 1)")));
                }
                (*lr, *weight_decay)
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
                ..
            } => {
                if !(0.0..1.0).contains(beta1) || !(0.0..1.0).contains(beta2) || *eps <= 0.0 {
                    return Err(Error::InvalidArgument("adam: betas must be in [0, 1), eps > 0".into()));
                }
                (*lr, *weight_decay)
            }
        };
        if !(lr.is_finite() && lr > 0.0) || !(wd.is_finite() && wd >= 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive, weight decay non-negative".into()));
        }
        Ok(())
    }
}

/// Optimizer state. Slots are created lazily per parameter.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    total_epochs: usize,
    epoch: usize,
    step: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, total_epochs: usize) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            total_epochs,
            epoch: 0,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        let (base, schedule) = match &self.config {
            OptimizerConfig::Sgd { lr, schedule, .. } | OptimizerConfig::Adam { lr, schedule, .. } => (*lr, schedule),
        };
        schedule.lr(base, self.epoch, self.total_epochs, self.step)
    }

    /// Applies one update. Each parameter is updated from its own gradient
    /// and state only.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[(ParamId, Tensor<T>)]) -> Result<()> {
        let lr = T::lit(self.current_lr());
        let t = self.step + 1;
        for (id, grad) in grads {
            let value = params.value(*id);
            if value.shape() != grad.shape() {
                return Err(Error::InvalidShape {
                    op: "optimizer",
                    msg: format!(
                        "gradient shape {} does not match parameter {:?} of shape {}",
                        grad.shape(),
                        params.get(*id).name,
                        value.shape()
                    ),
                });
            }
            let slot = id.index();
            if self.first.len() <= slot {
                self.first.resize(slot + 1, None);
                self.second.resize(slot + 1, None);
            }
            match &self.config {
                OptimizerConfig::Sgd {
                    momentum,
                    weight_decay,
                    ..
                } => {
                    let (mu, wd) = (T::lit(*momentum), T::lit(*weight_decay));
                    let vel = self.first[slot].get_or_insert_with(|| Tensor::zeros_like(grad));
                    let p = params.value_mut(*id).as_mut_slice();
                    for ((v, w), &g) in vel.as_mut_slice().iter_mut().zip(p.iter_mut()).zip(grad.data()) {
                        *v = mu * *v + g + wd * *w;
                        *w -= lr * *v;
                    }
                }
                OptimizerConfig::Adam {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                    ..
                } => {
                    let (b1, b2, e, wd) = (T::lit(*beta1), T::lit(*beta2), T::lit(*eps), T::lit(*weight_decay));
                    let c1 = T::one() - T::lit(beta1.powi(t as i32));
                    let c2 = T::one() - T::lit(beta2.powi(t as i32));
                    let m = self.first[slot].get_or_insert_with(|| Tensor::zeros_like(grad));
                    let v = self.second[slot].get_or_insert_with(|| Tensor::zeros_like(grad));
                    let p = params.value_mut(*id).as_mut_slice();
                    for (((mi, vi), w), &g0) in m
                        .as_mut_slice()
                        .iter_mut()
                        .zip(v.as_mut_slice().iter_mut())
                        .zip(p.iter_mut())
                        .zip(grad.data())
                    {
                        let g = g0 + wd * *w;
                        *mi = b1 * *mi + (T::one() - b1) * g;
                        *vi = b2 * *vi + (T::one() - b2) * g * g;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *w -= lr * mhat / (vhat.sqrt() + e);
                    }
                }
            }
        }
        self.step = t;
        Ok(())
    }
}
