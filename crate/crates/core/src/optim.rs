//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimizer and schedule settings shared by every trainer in the crate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    /// Local federated training: lr 1e-4, weight decay 1e-3, three epochs.
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-4,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 3,
            batch_size: 8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, prefix: &str, errors: &mut Vec<String>) {
        let pos = |name: &str, v: f64, errors: &mut Vec<String>| {
            if !(v > 0.0 && v.is_finite()) {
                errors.push(format!("{prefix}.{name} must be positive, got {v}"));
            }
        };
        pos("lr", self.lr, errors);
        pos("eps", self.eps, errors);
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            errors.push(format!(
                "{prefix}.weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                errors.push(format!("{prefix}.{name} must be in (0,1), got {b}"));
            }
        }
        if self.epochs == 0 {
            errors.push(format!("{prefix}.epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            errors.push(format!("{prefix}.batch_size must be at least 1"));
        }
    }

    pub fn check(&self) -> Result<()> {
        let mut errors = Vec::new();
        self.validate("optimizer", &mut errors);
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(errors.join("; ")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, sizes: &[usize]) -> Self {
        AdamW {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            cfg,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.numel() != self.m[i].len() || g.numel() != self.m[i].len() {
                return Err(Error::shape(
                    "adamw",
                    format!("slot {i}: param {:?}, grad {:?}", p.shape(), g.shape()),
                ));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
        Ok(())
    }
}
