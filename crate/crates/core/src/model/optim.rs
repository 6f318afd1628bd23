//! AdamW with bias correction and a linearly decaying learning rate.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::encoder::{Batch, LossBreakdown, Model, ModelError};
use super::params::ModelParams;
use super::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_steps: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_steps: 2000,
        }
    }
}

impl OptimizerConfig {
    /// `lr₀ · (1 − t / max_steps)`, clamped at zero.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.max_steps == 0 {
            return 0.0;
        }
        self.lr * (1.0 - step as f64 / self.max_steps as f64).max(0.0)
    }
}

pub struct AdamW<T> {
    pub config: OptimizerConfig,
    pub step: u64,
    m: ModelParams<T>,
    v: ModelParams<T>,
    decay: Vec<bool>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: OptimizerConfig, params: &ModelParams<T>) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
            decay: params.block_infos().into_iter().map(|b| b.decay).collect(),
        }
    }

    /// Applies one update with the learning rate of the current step.
    pub fn update(&mut self, params: &mut ModelParams<T>, grad: &ModelParams<T>) {
        let c = &self.config;
        let lr = c.lr_at(self.step);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let (one_b1, one_b2) = (T::c(1.0 - c.beta1), T::c(1.0 - c.beta2));
        let (inv_bc1, inv_bc2) = (T::c(1.0 / bc1), T::c(1.0 / bc2));
        let (lr_t, eps) = (T::c(lr), T::c(c.eps));
        let wd = T::c(lr * c.weight_decay);
        let blocks = params
            .blocks_mut()
            .into_iter()
            .zip(grad.blocks())
            .zip(self.m.blocks_mut().into_iter().zip(self.v.blocks_mut()))
            .zip(&self.decay);
        for (((p, g), (m, v)), &decay) in blocks {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                let mhat = m[i] * inv_bc1;
                let vhat = v[i] * inv_bc2;
                if decay {
                    p[i] -= wd * p[i];
                }
                p[i] -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        self.step += 1;
    }
}

/// One optimisation step: loss and gradients on `batch` (dropout from `rng`
/// when the model config enables it), then an AdamW update. Returns the loss
/// measured before the update.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    batch: &Batch<T>,
    rng: &mut dyn RngCore,
) -> Result<LossBreakdown, ModelError> {
    let (loss, grad) = model.backward_train(batch, rng)?;
    if !loss.total.is_finite() {
        return Err(ModelError::NonFiniteLoss {
            step: opt.step,
            detail: format!("{loss:?}"),
        });
    }
    if !grad.is_finite() {
        return Err(ModelError::NonFiniteLoss {
            step: opt.step,
            detail: "non-finite gradient".into(),
        });
    }
    opt.update(&mut model.params, &grad);
    Ok(loss)
}
