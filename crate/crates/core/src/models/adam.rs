//! ADAM with bias correction over a flat parameter vector.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// θ ← θ − lr·m̂/(√v̂ + ε)
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(theta.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for k in 0..theta.len() {
            let g = grad[k];
            self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g;
            self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * g * g;
            let m_hat = self.m[k] / c1;
            let v_hat = self.v[k] / c2;
            theta[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_closed_form() {
        let mut opt = Adam::new(1, AdamConfig::default());
        let mut theta = [0.0];
        opt.step(&mut theta, &[1.0], 0.001);
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((theta[0] - expected).abs() < 1e-18, "{}", theta[0]);
        assert!((theta[0] + 0.000999999).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut opt = Adam::new(3, AdamConfig::default());
        let mut theta = [0.5, -1.0, 2.0];
        for _ in 0..50 {
            opt.step(&mut theta, &[0.0; 3], 0.001);
        }
        assert_eq!(theta, [0.5, -1.0, 2.0]);
    }

    #[test]
    fn step_size_is_bounded_by_lr() {
        // |Δθ| ≈ lr for a constant gradient of any magnitude
        let mut opt = Adam::new(2, AdamConfig::default());
        let mut theta = [0.0, 0.0];
        for _ in 0..10 {
            opt.step(&mut theta, &[1e6, -1e-3], 0.01);
        }
        assert!((theta[0] + 0.1).abs() < 1e-6);
        assert!((theta[1] - 0.1).abs() < 1e-4);
    }
}
