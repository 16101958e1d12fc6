use serde::{Deserialize, Serialize};

use super::network::{MoENetwork, Params};
use crate::error::{Error, Result};

/// Linear warmup from zero followed by cosine decay to `min_lr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub min_lr: f64,
    /// Fraction of `total_steps` spent warming up.
    pub warmup_fraction: f64,
    pub total_steps: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            peak_lr: 1e-2,
            min_lr: 0.0,
            warmup_fraction: 0.03,
            total_steps: 2000,
        }
    }
}

impl LrSchedule {
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.total_steps as f64).round() as usize
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        if step < warm {
            return self.peak_lr * step as f64 / warm as f64;
        }
        let decay_steps = self.total_steps.saturating_sub(warm).max(1);
        let progress = ((step - warm) as f64 / decay_steps as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.min_lr + (self.peak_lr - self.min_lr) * cosine
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Decoupled-weight-decay Adam. Moment buffers mirror the parameter layout.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Params,
    v: Params,
    steps: u64,
}

impl AdamW {
    pub fn new(net: &MoENetwork, config: AdamWConfig) -> Self {
        Self {
            config,
            m: Params::zeros(&net.config),
            v: Params::zeros(&net.config),
            steps: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// Applies one update at learning rate `lr`. Frozen gate blocks are left
    /// untouched, including their moments.
    pub fn step(&mut self, net: &mut MoENetwork, grads: &Params, lr: f64) -> Result<()> {
        for (kind, g) in grads.blocks() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient { block: kind.name() });
            }
        }
        self.steps += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        let freeze_gate = net.config.freeze_gate;
        let params = net.params_mut();
        let blocks = params
            .blocks_mut()
            .into_iter()
            .zip(grads.blocks())
            .zip(self.m.blocks_mut().into_iter().zip(self.v.blocks_mut()));
        for (((kind, p), (_, g)), ((_, m), (_, v))) in blocks {
            if freeze_gate && kind.is_gate() {
                continue;
            }
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * p[i]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::network::MoEConfig;

    #[test]
    fn warmup_starts_at_zero_and_peaks_at_boundary() {
        let s = LrSchedule {
            peak_lr: 2e-5,
            min_lr: 0.0,
            warmup_fraction: 0.03,
            total_steps: 2000,
        };
        assert_eq!(s.warmup_steps(), 60);
        assert_eq!(s.lr_at(0), 0.0);
        assert!(s.lr_at(30) > 0.0 && s.lr_at(30) < 2e-5);
        assert_eq!(s.lr_at(60), 2e-5);
        assert!(s.lr_at(1000) < 2e-5);
        assert!(s.lr_at(2000).abs() < 1e-20);
    }

    #[test]
    fn zero_gradient_is_a_null_update() {
        let mut net = MoENetwork::new(MoEConfig {
            freeze_gate: false,
            ..MoEConfig::default()
        })
        .unwrap();
        let before = net.params.clone();
        let mut opt = AdamW::new(&net, AdamWConfig::default());
        let zeros = Params::zeros(&net.config);
        for _ in 0..5 {
            opt.step(&mut net, &zeros, 0.1).unwrap();
        }
        assert_eq!(net.params, before);
    }

    #[test]
    fn frozen_gate_bytes_unchanged() {
        let mut net = MoENetwork::new(MoEConfig::default()).unwrap();
        let gate_before = net.params.layers[0].gate.clone();
        let mut opt = AdamW::new(&net, AdamWConfig::default());
        let mut g = Params::zeros(&net.config);
        g.layers[0].gate.iter_mut().for_each(|x| *x = 1.0);
        g.embedding.iter_mut().for_each(|x| *x = 1.0);
        for _ in 0..100 {
            opt.step(&mut net, &g, 0.01).unwrap();
        }
        let same = net.params.layers[0]
            .gate
            .iter()
            .zip(&gate_before)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut net = MoENetwork::new(MoEConfig::default()).unwrap();
        let mut opt = AdamW::new(&net, AdamWConfig::default());
        let mut g = Params::zeros(&net.config);
        g.head[3] = f64::NAN;
        match opt.step(&mut net, &g, 0.01) {
            Err(Error::NonFiniteGradient { block }) => assert_eq!(block, "head"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
