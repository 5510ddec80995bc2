use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateRule {
    Adam,
    MomentumSgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub rule: UpdateRule,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum: f64,
}

impl OptimConfig {
    pub fn adam(lr: f64) -> Self {
        Self { rule: UpdateRule::Adam, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, momentum: 0.0 }
    }

    pub fn momentum_sgd(lr: f64, momentum: f64) -> Self {
        Self { rule: UpdateRule::MomentumSgd, lr, beta1: 0.0, beta2: 0.0, eps: 0.0, momentum }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

/// Optimizer state for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: OptimConfig, len: usize) -> Self {
        assert!(config.lr > 0.0, "learning rate must be positive");
        let second = match config.rule {
            UpdateRule::Adam => vec![0.0; len],
            UpdateRule::MomentumSgd => Vec::new(),
        };
        Self { config, first: vec![0.0; len], second, t: 0 }
    }

    /// Changes the step size for the following steps; moments are kept.
    pub fn set_lr(&mut self, lr: f64) {
        assert!(lr > 0.0, "learning rate must be positive");
        self.config.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.first.len(), "optimizer sized for a different vector");
        assert_eq!(params.len(), grads.len(), "gradient length mismatch");
        self.t += 1;
        let c = self.config;
        match c.rule {
            UpdateRule::Adam => {
                let bc1 = 1.0 - c.beta1.powi(self.t as i32);
                let bc2 = 1.0 - c.beta2.powi(self.t as i32);
                for (((p, g), m), v) in
                    params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second)
                {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                }
            }
            UpdateRule::MomentumSgd => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    *v = c.momentum * *v + g;
                    *p -= c.lr * *v;
                }
            }
        }
    }
}
