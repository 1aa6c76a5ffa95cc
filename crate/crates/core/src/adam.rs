use serde::{Deserialize, Serialize};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    /// Expert training and fine-tuning defaults: lr 1e-3, moments (0.9, 0.999).
    pub fn expert_default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Mixture-coefficient defaults: lr 1e-2, moments (0.9, 0.99).
    pub fn mixture_default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let ok =
            self.lr > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(crate::GlueError::Config(format!("invalid Adam config {self:?}")))
        }
    }
}

/// One bias-corrected Adam update. `step` is the 1-based step index after
/// incrementing.
pub fn adam_update(cfg: &AdamConfig, params: &mut [f64], grad: &[f64], m1: &mut [f64], m2: &mut [f64], step: u64) {
    debug_assert!(step >= 1);
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grad[i];
        m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * g;
        m2[i] = cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m1[i] / bc1;
        let v_hat = m2[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// Adam optimizer owning its moment buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    m1: Vec<f64>,
    m2: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, dim: usize) -> Self {
        Self {
            cfg,
            m1: vec![0.0; dim],
            m2: vec![0.0; dim],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        adam_update(&self.cfg, params, grad, &mut self.m1, &mut self.m2, self.step);
    }
}
