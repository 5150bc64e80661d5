//! Adam with a warmup-then-linear-decay learning-rate schedule.

use crate::backbone::{flatten, param_count, Params};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    /// Settings used for pre-training.
    pub const PRETRAIN: AdamConfig = AdamConfig {
        beta1: 0.9,
        beta2: 0.98,
        eps: 1e-6,
    };
    /// Library-standard settings used for head adaptation.
    pub const STANDARD: AdamConfig = AdamConfig {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &dyn Params) -> Self {
        let n = param_count(params);
        Self {
            config,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update with gradients laid out like `params`.
    pub fn step(&mut self, params: &mut dyn Params, grads: &dyn Params, lr: f64) {
        let g = flatten(grads);
        assert_eq!(g.len(), self.m.len(), "gradient layout does not match parameters");
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut i = 0;
        params.visit_mut(&mut |p| {
            for w in p.iter_mut() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
                i += 1;
            }
        });
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then linear decay to 0 at `total`.
pub fn learning_rate(step: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let s = step as f64 + 1.0;
    if step < warmup {
        return peak * s / warmup as f64;
    }
    let rest = (total - warmup.min(total)) as f64;
    if rest <= 0.0 {
        return peak;
    }
    peak * ((total as f64 - step as f64) / rest).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quad(Vec<f64>);
    impl Params for Quad {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
            f(prefix.to_string(), &[self.0.len()], &self.0);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
            f(&mut self.0);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Quad(vec![1.0, -2.0]);
        let g = Quad(vec![0.5, -3.0]);
        let mut opt = Adam::new(AdamConfig::PRETRAIN, &p);
        opt.step(&mut p, &g, 0.1);
        // Bias-corrected first step is lr * sign(g) up to eps.
        assert!((p.0[0] - 0.9).abs() < 1e-5);
        assert!((p.0[1] + 1.9).abs() < 1e-5);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Quad(vec![3.0, -4.0]);
        let mut opt = Adam::new(AdamConfig::STANDARD, &p);
        for _ in 0..2000 {
            let g = Quad(p.0.iter().map(|x| 2.0 * x).collect());
            opt.step(&mut p, &g, 0.01);
        }
        assert!(p.0.iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn schedule_shape() {
        assert!((learning_rate(0, 1.0, 10, 100) - 0.1).abs() < 1e-12);
        assert!((learning_rate(9, 1.0, 10, 100) - 1.0).abs() < 1e-12);
        assert!((learning_rate(10, 1.0, 10, 100) - 1.0).abs() < 1e-12);
        assert!((learning_rate(55, 1.0, 10, 100) - 0.5).abs() < 1e-12);
        assert!(learning_rate(99, 1.0, 10, 100) > 0.0);
        assert_eq!(learning_rate(100, 1.0, 10, 100), 0.0);
    }
}
