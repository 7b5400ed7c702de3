//! Local optimizers for adapter parameters: plain SGD and AdamW with
//! decoupled weight decay, with an optional cosine learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adamw() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Fine-tuning rate for large pretrained backbones. Far too small for the
/// toy model, whose preset uses 1e-2.
pub const DEFAULT_ADAMW_LR: f64 = 2e-5;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// Total schedule length in steps; `None` keeps the rate constant.
    pub cosine_total_steps: Option<u64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adamw(DEFAULT_ADAMW_LR, DEFAULT_WEIGHT_DECAY)
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            weight_decay: 0.0,
            cosine_total_steps: None,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::adamw(),
            lr,
            weight_decay,
            cosine_total_steps: None,
        }
    }

    /// `η_t = η₀·(1 + cos(π·t/T))/2`, held at zero past `T`.
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.cosine_total_steps {
            Some(total) if total > 0 => {
                let t = step.min(total) as f64 / total as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
            _ => self.lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::InvalidArgument(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if let OptimizerKind::AdamW { beta1, beta2, eps } = self.kind {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::InvalidArgument(format!("invalid AdamW parameters {:?}", self.kind)));
            }
        }
        Ok(())
    }
}

/// Optimizer state for one local training session.
#[derive(Debug, Clone)]
pub struct OptState {
    /// Updates applied so far (drives Adam bias correction).
    pub steps: u64,
    /// Position on the learning-rate schedule.
    pub schedule_step: u64,
    first: Option<AdapterSet>,
    second: Option<AdapterSet>,
}

impl OptState {
    pub fn new(schedule_offset: u64) -> Self {
        Self {
            steps: 0,
            schedule_step: schedule_offset,
            first: None,
            second: None,
        }
    }
}

impl Default for OptState {
    fn default() -> Self {
        Self::new(0)
    }
}

/// One optimizer update of `adapters` from `grads`.
pub fn local_step(
    adapters: &mut AdapterSet,
    grads: &AdapterSet,
    state: &mut OptState,
    config: &OptimizerConfig,
) -> Result<()> {
    adapters.check_congruent(grads, "local_step")?;
    let lr = config.lr_at(state.schedule_step);
    state.steps += 1;
    state.schedule_step += 1;
    let wd = config.weight_decay;
    match config.kind {
        OptimizerKind::Sgd => {
            if lr == 0.0 {
                return Ok(());
            }
            for (p, g) in adapters.tensors_mut().into_iter().zip(grads.flatten_updates()) {
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= lr * (gv + wd * *pv);
                }
            }
        }
        OptimizerKind::AdamW { beta1, beta2, eps } => {
            let first = state.first.get_or_insert_with(|| grads.zeros_like());
            let second = state.second.get_or_insert_with(|| grads.zeros_like());
            let bc1 = 1.0 - beta1.powf(state.steps as f64);
            let bc2 = 1.0 - beta2.powf(state.steps as f64);
            let params = adapters.tensors_mut();
            let ms = first.tensors_mut();
            let vs = second.tensors_mut();
            for (((p, g), m), v) in params.into_iter().zip(grads.flatten_updates()).zip(ms).zip(vs) {
                let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
                for i in 0..p.len() {
                    let gi = g.data()[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                    if lr != 0.0 {
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * p[i]);
                    }
                }
            }
        }
    }
    adapters.ensure_finite("local_step")
}
