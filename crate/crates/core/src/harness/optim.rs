//! SGD with momentum and Adam, both with decoupled weight decay, plus a
//! warmup-then-cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    SgdMomentum {
        lr: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
        #[serde(default)]
        clip_norm: Option<f64>,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
        #[serde(default)]
        clip_norm: Option<f64>,
    },
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

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::SgdMomentum { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    fn clip_norm(&self) -> Option<f64> {
        match *self {
            OptimizerConfig::SgdMomentum { clip_norm, .. } | OptimizerConfig::Adam { clip_norm, .. } => clip_norm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {lr}")));
        }
        if let Some(c) = self.clip_norm() {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")))
            }
        };
        match *self {
            OptimizerConfig::SgdMomentum {
                momentum, weight_decay, ..
            } => {
                unit("momentum", momentum)?;
                unit("weight_decay", weight_decay)
            }
            OptimizerConfig::Adam {
                beta1,
                beta2,
                eps,
                weight_decay,
                ..
            } => {
                unit("beta1", beta1)?;
                unit("beta2", beta2)?;
                unit("weight_decay", weight_decay)?;
                if eps > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config("eps must be positive".into()))
                }
            }
        }
    }
}

/// Linear warmup over the first `warmup_fraction` of training, then cosine
/// decay from `lr` to `final_lr_ratio · lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub steps: usize,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_final_ratio")]
    pub final_lr_ratio: f64,
}

fn default_warmup() -> f64 {
    0.1
}
fn default_final_ratio() -> f64 {
    0.1
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction must lie in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.final_lr_ratio) {
            return Err(Error::Config(format!(
                "final_lr_ratio must lie in [0, 1], got {}",
                self.final_lr_ratio
            )));
        }
        Ok(())
    }

    /// Multiplier on the base learning rate at `step` (0-based).
    pub fn factor(&self, step: usize) -> f64 {
        let warm = (self.warmup_fraction * self.steps as f64).round() as usize;
        if step < warm {
            return (step + 1) as f64 / warm as f64;
        }
        let span = self.steps.saturating_sub(warm).max(1) as f64;
        let t = ((step - warm) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.final_lr_ratio + (1.0 - self.final_lr_ratio) * cos
    }
}

/// Optimizer state: momentum buffers or Adam moments, shaped like the
/// parameters.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: ParamSet,
    second: Option<ParamSet>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamSet) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            first: params.zeros_like(),
            second: matches!(config, OptimizerConfig::Adam { .. }).then(|| params.zeros_like()),
            t: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update with learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64) -> Result<()> {
        params.check_same_shape(grads, "optimizer step")?;
        params.check_same_shape(&self.first, "optimizer step")?;
        self.t += 1;
        let clip = match self.config.clip_norm() {
            Some(c) => {
                let n = crate::numkit::norm(&grads.flatten());
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let grads = grads.arrays().map(|(_, m)| m.as_slice());
        let first = self.first.arrays_mut();
        match self.config {
            OptimizerConfig::SgdMomentum {
                momentum, weight_decay, ..
            } => {
                for ((p, g), buf) in params.arrays_mut().zip(grads).zip(first) {
                    for ((p, &g), b) in p.as_mut_slice().iter_mut().zip(g).zip(buf.as_mut_slice()) {
                        *b = momentum * *b + clip * g;
                        *p -= lr * (*b + weight_decay * *p);
                    }
                }
            }
            OptimizerConfig::Adam {
                beta1,
                beta2,
                eps,
                weight_decay,
                ..
            } => {
                let t = self.t as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let second = self.second.as_mut().expect("Adam keeps second moments").arrays_mut();
                for (((p, g), m), v) in params.arrays_mut().zip(grads).zip(first).zip(second) {
                    let it = p
                        .as_mut_slice()
                        .iter_mut()
                        .zip(g)
                        .zip(m.as_mut_slice())
                        .zip(v.as_mut_slice());
                    for (((p, &g), m), v) in it {
                        let g = clip * g;
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                        *p -= lr * (update + weight_decay * *p);
                    }
                }
            }
        }
        Ok(())
    }
}
