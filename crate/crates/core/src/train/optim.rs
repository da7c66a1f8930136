use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: [0.9, 0.999],
            weight_decay: 0.05,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl ScheduleConfig {
    /// Warmup of 5% of `total_steps`, rounded down.
    pub fn with_default_warmup(total_steps: usize) -> Self {
        Self {
            warmup_steps: total_steps / 20,
            total_steps,
        }
    }
}

/// Learning rate for step `t` (0-based): linear warmup `lr·(t+1)/W`, then
/// cosine decay `lr·½(1 + cos(π(t−W)/(T−W)))`, reaching 0 at `t = T`.
pub fn learning_rate(lr: f64, schedule: &ScheduleConfig, t: usize) -> f64 {
    let (w, total) = (schedule.warmup_steps, schedule.total_steps);
    if t < w {
        return lr * (t + 1) as f64 / w as f64;
    }
    if t >= total {
        return 0.0;
    }
    let progress = (t - w) as f64 / (total - w) as f64;
    lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW with decoupled weight decay on matrices (rank ≥ 2) only.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar = f32> {
    pub config: OptimizerConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: OptimizerConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::dim(
                "adamw",
                format!("{} params, {} grads, state for {}", params.len(), grads.len(), self.m.len()),
            ));
        }
        self.step += 1;
        let [b1, b2] = self.config.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let f = T::from_f64_lossy;
        let (b1t, b2t, one) = (f(b1), f(b2), T::one());
        let (c1t, c2t, lrt, eps) = (f(c1), f(c2), f(lr), f(self.config.eps));
        let decay = f(1.0 - lr * self.config.weight_decay);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if g.len() != p.numel() || m.len() != p.numel() {
                return Err(Error::dim("adamw", format!("gradient of length {} for {:?}", g.len(), p.shape())));
            }
            let decayed = p.rank() >= 2;
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                if decayed {
                    *w *= decay;
                }
                *mi = b1t * *mi + (one - b1t) * gi;
                *vi = b2t * *vi + (one - b2t) * gi * gi;
                let mhat = *mi / c1t;
                let vhat = *vi / c2t;
                *w -= lrt * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
