//! SGD with momentum and L2 weight decay.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, NetworkHandle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.125,
            momentum: 0.9,
            weight_decay: 0.9e-4,
            batch_size: 64,
            epochs: 100,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    velocity: Vec<ArrayD<f64>>,
}

impl Sgd {
    pub fn new(net: &NetworkHandle) -> Self {
        Self {
            velocity: net
                .params()
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect(),
        }
    }

    pub fn from_buffers(velocity: Vec<ArrayD<f64>>) -> Self {
        Self { velocity }
    }

    pub fn buffers(&self) -> &[ArrayD<f64>] {
        &self.velocity
    }

    /// `v ← μ·v + (g + λ·θ)`, `θ ← θ − lr·v`.
    pub fn step(&mut self, net: &mut NetworkHandle, grads: &Gradients, cfg: &OptimConfig) -> Result<()> {
        let params = net.params_mut()?;
        if grads.len() != params.len() || self.velocity.len() != params.len() {
            return Err(Error::Dimension(format!(
                "{} gradients and {} momentum buffers for {} parameters",
                grads.len(),
                self.velocity.len(),
                params.len()
            )));
        }
        for ((param, grad), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if grad.shape() != param.value.shape() || vel.shape() != param.value.shape() {
                return Err(Error::Dimension(format!("gradient shape mismatch for {}", param.name)));
            }
            ndarray::Zip::from(&mut param.value)
                .and(grad)
                .and(vel)
                .for_each(|theta, &g, v| {
                    *v = cfg.momentum * *v + (g + cfg.weight_decay * *theta);
                    *theta -= cfg.lr * *v;
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    fn net() -> NetworkHandle {
        let arch = Architecture {
            in_channels: 1,
            widths: vec![2],
            strides: vec![1],
            kernel: 3,
            hidden: 3,
            embed_dim: 2,
        };
        NetworkHandle::random(arch, 1).unwrap()
    }

    fn zeros(net: &NetworkHandle) -> Gradients {
        net.params().iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect()
    }

    #[test]
    fn defaults_match_reference_training_setup() {
        let c = OptimConfig::default();
        assert_eq!((c.lr, c.momentum, c.weight_decay), (0.125, 0.9, 0.9e-4));
        assert_eq!((c.batch_size, c.epochs), (64, 100));
    }

    #[test]
    fn weight_decay_shrinks_by_constant_factor() {
        let mut n = net();
        let before = n.clone();
        let cfg = OptimConfig { lr: 0.5, momentum: 0.0, weight_decay: 0.01, ..OptimConfig::default() };
        let mut opt = Sgd::new(&n);
        let g = zeros(&n);
        for _ in 0..3 {
            opt.step(&mut n, &g, &cfg).unwrap();
        }
        let factor = (1.0f64 - 0.5 * 0.01).powi(3);
        for (a, b) in n.params().iter().zip(before.params()) {
            for (x, y) in a.value.iter().zip(b.value.iter()) {
                assert!((x - y * factor).abs() <= 1e-12 * y.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut n = net();
        let before = n.fingerprint();
        let mut g = zeros(&n);
        g.iter_mut().for_each(|a| a.fill(3.0));
        let cfg = OptimConfig { lr: 0.0, ..OptimConfig::default() };
        Sgd::new(&n).step(&mut n, &g, &cfg).unwrap();
        assert_eq!(n.fingerprint(), before);
    }

    #[test]
    fn frozen_networks_are_rejected() {
        let n = net();
        let g = zeros(&n);
        let mut frozen = n.freeze();
        let err = Sgd::new(&frozen).step(&mut frozen, &g, &OptimConfig::default());
        assert!(matches!(err, Err(Error::Frozen)));
    }
}
