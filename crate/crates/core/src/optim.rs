//! Masked SGD with momentum and a cosine learning-rate schedule.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ExpandingModel, Grads, TensorId, Trainable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Cosine decay from `lr` to `min_lr` over the run's epochs.
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// Global gradient-norm clip; disabled when absent.
    pub clip_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.1,
            min_lr: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::Cosine,
            clip_norm: None,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("optimizer.lr", "must be > 0"));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return Err(Error::config("optimizer.min_lr", "must lie in [0, lr]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("optimizer.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("optimizer.weight_decay", "must be >= 0"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("optimizer.clip_norm", "must be > 0"));
            }
        }
        Ok(())
    }

    /// Learning rate for 0-based `epoch` of `total`.
    pub fn lr_at(&self, epoch: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                if total <= 1 {
                    return self.lr;
                }
                let frac = epoch as f64 / (total - 1) as f64;
                self.min_lr
                    + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// SGD that only touches the entries the model's phase marks trainable.
/// Momentum buffers are keyed by tensor and dropped when shapes change.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: HashMap<TensorId, Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Sgd {
            cfg,
            velocity: HashMap::new(),
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    /// Applies one update with learning rate `lr`. Returns the gradient norm
    /// over trainable entries before clipping.
    pub fn step(&mut self, model: &mut ExpandingModel, grads: &Grads, lr: f64) -> f64 {
        let ids = model.tensor_ids();
        let masks: Vec<(TensorId, Trainable)> = ids
            .iter()
            .map(|&id| (id, model.trainable(id)))
            .filter(|(_, t)| t.any())
            .collect();

        let mut sq = 0.0;
        for (id, mask) in &masks {
            for (i, g) in grads.tensor(*id).iter().enumerate() {
                if mask.get(i) {
                    sq += g * g;
                }
            }
        }
        let norm = sq.sqrt();
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };

        for (id, mask) in masks {
            let decay = if id == TensorId::Temperature {
                0.0
            } else {
                self.cfg.weight_decay
            };
            let g = grads.tensor(id);
            let param = model.tensor_mut(id);
            let v = self.velocity.entry(id).or_default();
            if v.len() != param.len() {
                *v = vec![0.0; param.len()];
            }
            for i in 0..param.len() {
                if !mask.get(i) {
                    continue;
                }
                let d = scale * g[i] + decay * param[i];
                v[i] = self.cfg.momentum * v[i] + d;
                param[i] -= lr * v[i];
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BackboneSpec, Phase};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> ExpandingModel {
        let spec = BackboneSpec {
            input_dim: 3,
            hidden: vec![4, 4],
            feature_dim: 2,
            ..BackboneSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = ExpandingModel::new(spec, &[0, 1], &mut rng).unwrap();
        m.expand(&[2], &mut rng).unwrap();
        m
    }

    fn ones(m: &ExpandingModel) -> Grads {
        let mut g = Grads::zeros_like(m);
        for id in m.tensor_ids() {
            g.tensor_mut(id).fill(1.0);
        }
        g
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = SgdConfig::default();
        assert!((c.lr_at(0, 10) - 0.1).abs() < 1e-15);
        assert!((c.lr_at(9, 10) - 1e-4).abs() < 1e-15);
        assert!(c.lr_at(4, 10) < 0.1 && c.lr_at(4, 10) > c.lr_at(5, 10));
    }

    #[test]
    fn frozen_entries_do_not_move() {
        let mut m = model();
        m.set_phase(Phase::Old).unwrap();
        let before = m.clone();
        let g = ones(&m);
        let mut opt = Sgd::new(SgdConfig::default());
        opt.step(&mut m, &g, 0.1);
        for id in m.tensor_ids() {
            let mask = m.trainable(id);
            for (i, (a, b)) in m.tensor(id).iter().zip(before.tensor(id)).enumerate() {
                if mask.get(i) {
                    assert_ne!(a, b, "{id} entry {i} should move");
                } else {
                    assert_eq!(a.to_bits(), b.to_bits(), "{id} entry {i} should stay");
                }
            }
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut m = model();
        m.set_phase(Phase::Plastic).unwrap();
        let cfg = SgdConfig {
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        let mut opt = Sgd::new(cfg);
        let g = ones(&m);
        let id = TensorId::LowBias(0);
        let p0 = m.tensor(id)[0];
        opt.step(&mut m, &g, 1.0);
        let p1 = m.tensor(id)[0];
        opt.step(&mut m, &g, 1.0);
        let p2 = m.tensor(id)[0];
        assert!((p0 - p1 - 1.0).abs() < 1e-12);
        assert!((p1 - p2 - 1.9).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_the_update() {
        let mut m = model();
        m.set_phase(Phase::Plastic).unwrap();
        let cfg = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
            ..SgdConfig::default()
        };
        let before = m.clone();
        let g = ones(&m);
        let norm = Sgd::new(cfg).step(&mut m, &g, 1.0);
        assert!((norm - (m.param_count() as f64).sqrt()).abs() < 1e-9);
        let moved: f64 = m
            .tensor_ids()
            .iter()
            .flat_map(|&id| {
                m.tensor(id)
                    .iter()
                    .zip(before.tensor(id))
                    .map(|(a, b)| (a - b) * (a - b))
                    .collect::<Vec<_>>()
            })
            .sum::<f64>()
            .sqrt();
        assert!((moved - 1.0).abs() < 1e-9);
    }

    #[test]
    fn temperature_is_not_decayed() {
        let mut m = model();
        m.set_phase(Phase::Plastic).unwrap();
        m.tensor_mut(TensorId::Temperature)[0] = 2.0;
        let w0 = m.tensor(TensorId::Classifier)[0];
        let g = Grads::zeros_like(&m);
        Sgd::new(SgdConfig::default()).step(&mut m, &g, 0.1);
        assert_eq!(m.tensor(TensorId::Temperature)[0], 2.0);
        let w1 = m.tensor(TensorId::Classifier)[0];
        assert!((w1 - w0 * (1.0 - 0.1 * 5e-4)).abs() < 1e-15);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = SgdConfig {
            lr: 0.0,
            ..SgdConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(SgdConfig::default().validate().is_ok());
    }
}
