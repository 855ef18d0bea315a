//! AdamW with linear warmup followed by linear decay.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::model::Parameters;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Fraction of total steps spent warming up.
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 128,
            epochs: 60,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr > 0.0) || self.batch == 0 || self.epochs == 0 {
            return Err("optimizer needs lr > 0, batch ≥ 1, epochs ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err("warmup_fraction must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Learning rate at `step` (0-based) of `total`.
pub fn scheduled_lr(config: &OptimizerConfig, step: usize, total: usize) -> f64 {
    let warmup = (config.warmup_fraction * total as f64).ceil() as usize;
    let t = step as f64 + 1.0;
    if step < warmup {
        config.lr * t / warmup as f64
    } else {
        let rest = (total - warmup).max(1) as f64;
        config.lr * (1.0 - (step - warmup) as f64 / rest).max(0.0)
    }
}

pub struct AdamW {
    config: OptimizerConfig,
    total_steps: usize,
    step: usize,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, params: &Parameters, total_steps: usize) -> Self {
        let zeros: Vec<Array2<f64>> = params.iter().map(|(_, _, p)| Array2::zeros(p.dim())).collect();
        Self {
            config,
            total_steps: total_steps.max(1),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update; `grads[id]` is `None` for parameters the loss did not touch.
    /// Returns the pre-clipping gradient norm.
    pub fn update(&mut self, params: &mut Parameters, grads: &[Option<Array2<f64>>]) -> f64 {
        let c = &self.config;
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        let lr = scheduled_lr(c, self.step, self.total_steps);
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for id in 0..self.m.len() {
            let Some(g) = grads.get(id).and_then(|g| g.as_ref()) else {
                continue;
            };
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let p = params.value_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * clip;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *p -= lr * (update + c.weight_decay * *p);
            });
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let c = OptimizerConfig::default();
        let total = 100;
        assert!((scheduled_lr(&c, 0, total) - 1e-4).abs() < 1e-12);
        assert!((scheduled_lr(&c, 9, total) - 1e-3).abs() < 1e-12);
        assert!((scheduled_lr(&c, 10, total) - 1e-3).abs() < 1e-12);
        assert!(scheduled_lr(&c, 99, total) < 2e-5);
        let lrs: Vec<f64> = (10..total).map(|s| scheduled_lr(&c, s, total)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Parameters::new();
        let id = p.add_filled("x", 1, 2, 3.0);
        let config = OptimizerConfig {
            lr: 0.1,
            weight_decay: 0.0,
            warmup_fraction: 0.0,
            clip_norm: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = AdamW::new(config, &p, 2000);
        for _ in 0..1500 {
            let g = p.value(id).mapv(|x| 2.0 * (x - 1.0));
            opt.update(&mut p, &[Some(g)]);
        }
        assert!(p.value(id).iter().all(|&x| (x - 1.0).abs() < 1e-2));
    }

    #[test]
    fn untouched_parameters_do_not_move() {
        let mut p = Parameters::new();
        let a = p.add_filled("a", 1, 1, 2.0);
        let b = p.add_filled("b", 1, 1, 2.0);
        let mut opt = AdamW::new(OptimizerConfig::default(), &p, 10);
        opt.update(&mut p, &[Some(ndarray::array![[1.0]]), None]);
        assert_ne!(p.value(a)[[0, 0]], 2.0);
        assert_eq!(p.value(b)[[0, 0]], 2.0);
    }
}
