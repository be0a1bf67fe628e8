//! Adaptive-moment optimizers, gradient clipping and learning-rate schedules.

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Weight decay folded into the gradient as an L2 term.
    Adam,
    /// Weight decay applied to the parameters directly, before the moment update.
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            ..Self::adam(lr, weight_decay)
        }
    }
}

/// Per-parameter moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Real = f32> {
    config: OptimizerConfig,
    lr: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig, params: &ParamSet<T>) -> Self {
        let zeros = |t: &Tensor<T>| vec![T::zero(); t.len()];
        Self {
            config,
            lr: config.lr,
            step: 0,
            m: params.values().iter().map(zeros).collect(),
            v: params.values().iter().map(zeros).collect(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[T] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[T] {
        &self.v[i]
    }

    /// Applies one update. Parameters whose gradient is `None` (frozen or
    /// unused) are left untouched. A non-finite gradient refuses the whole
    /// step before anything is modified.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Config(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.len() != params.values()[i].len() {
                    return Err(Error::Dimension {
                        op: "optimizer_step",
                        lhs: params.values()[i].shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                if !g.all_finite() {
                    return Err(Error::numeric(
                        "optimizer_step",
                        format!("non-finite gradient for parameter `{}`", params.iter().nth(i).unwrap().0),
                    ));
                }
            }
        }

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one = T::one();
        let bias1 = T::of(1.0 - c.beta1.powi(t));
        let bias2 = T::of(1.0 - c.beta2.powi(t));
        let lr = T::of(self.lr);
        let eps = T::of(c.eps);
        let wd = T::of(c.weight_decay);
        let decay = T::of(1.0 - self.lr * c.weight_decay);

        for (i, (param, grad)) in params.values_mut().iter_mut().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let g = match c.kind {
                    OptimizerKind::Adam => g + wd * *p,
                    OptimizerKind::AdamW => {
                        *p *= decay;
                        g
                    }
                };
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let mhat = m[j] / bias1;
                let vhat = v[j] / bias2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm over all present gradients.
pub fn global_norm<T: Real>(grads: &[Option<Tensor<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales every gradient by `max_norm / g` when the global norm `g`
/// exceeds `max_norm`. Returns the norm measured before clipping.
pub fn clip_gradients<T: Real>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    /// Halve after `patience` consecutive epochs without a new best
    /// validation loss.
    PlateauHalving { patience: usize },
    /// `½(1 + cos(π t / horizon))` scaling of the base rate.
    Cosine { horizon: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    kind: ScheduleKind,
    base: f64,
    current: f64,
    best: f64,
    stale: usize,
    halvings: u32,
}

impl LrSchedule {
    pub fn new(kind: ScheduleKind, base: f64) -> Self {
        Self {
            kind,
            base,
            current: base,
            best: f64::INFINITY,
            stale: 0,
            halvings: 0,
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn rate(&self) -> f64 {
        self.current
    }

    pub fn halvings(&self) -> u32 {
        self.halvings
    }

    pub fn cosine_rate(base: f64, t: usize, horizon: usize) -> f64 {
        if horizon == 0 {
            return base;
        }
        let t = t.min(horizon) as f64;
        base * 0.5 * (1.0 + (std::f64::consts::PI * t / horizon as f64).cos())
    }

    /// Advances the schedule after `epochs_done` completed epochs whose
    /// final validation loss was `val_loss`; returns the rate for the next
    /// epoch.
    pub fn step(&mut self, epochs_done: usize, val_loss: f64) -> f64 {
        match self.kind {
            ScheduleKind::Constant => {}
            ScheduleKind::PlateauHalving { patience } => {
                if val_loss < self.best {
                    self.best = val_loss;
                    self.stale = 0;
                } else {
                    self.stale += 1;
                    if self.stale >= patience {
                        self.halvings += 1;
                        self.current = self.base * 0.5f64.powi(self.halvings as i32);
                        self.stale = 0;
                    }
                }
            }
            ScheduleKind::Cosine { horizon } => {
                self.current = Self::cosine_rate(self.base, epochs_done, horizon);
            }
        }
        self.current
    }
}
