use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(name, format!("{b} not in [0, 1)")));
            }
        }
        if !(self.lr >= 0.0 && self.eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::invalid("optimizer", "lr, eps and weight_decay must be non-negative (eps > 0)"));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay and bias correction.
///
/// ```text
/// θ ← θ · (1 − lr · λ)
/// m ← β₁ m + (1 − β₁) g,   v ← β₂ v + (1 − β₂) g²
/// θ ← θ − lr · m̂ / (√v̂ + ε),   m̂ = m / (1 − β₁ᵗ),  v̂ = v / (1 − β₂ᵗ)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, n_params: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One update at learning rate `lr`. Non-finite gradients abort the step
    /// before any state is touched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                context: "adamw step",
                expected: vec![self.m.len()],
                actual: vec![params.len(), grads.len()],
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient entry {i}"),
            });
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *p *= decay;
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, 3);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.step(&mut p, &[0.0; 3], 1e-3).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn decay_only() {
        let mut opt = AdamW::new(AdamWConfig::default(), 2);
        let mut p = vec![2.0, -4.0];
        opt.step(&mut p, &[0.0; 2], 1e-3).unwrap();
        let f = 1.0 - 1e-3 * 0.05;
        assert_eq!(p, vec![2.0 * f, -4.0 * f]);
    }

    #[test]
    fn first_step_hand_trace() {
        // m = 0.1 g, v = 0.001 g², m̂ = g, v̂ = g²  =>  Δ = −lr · g / (|g| + ε)
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, 1);
        let g = 0.3;
        let mut p = vec![1.0];
        opt.step(&mut p, &[g], 0.01).unwrap();
        let expected = 1.0 - 0.01 * g / (g + 1e-8);
        assert!((p[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut opt = AdamW::new(AdamWConfig::default(), 2);
        let mut p = vec![1.0, 1.0];
        assert!(opt.step(&mut p, &[0.1, f64::NAN], 1e-3).is_err());
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(opt.step, 0);
    }
}
