//! AdamW with decoupled weight decay.

use std::collections::HashMap;

use thiserror::Error;

use super::tensor::Parameter;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter '{0}' has no gradient; run backward first")]
    MissingGrad(String),
}

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

struct MomentState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Per-parameter moment state persists in the optimizer across steps.
pub struct AdamW {
    pub config: AdamWConfig,
    state: HashMap<String, MomentState>,
    lr_multipliers: Vec<(String, f64)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> AdamW {
        AdamW {
            config,
            state: HashMap::new(),
            lr_multipliers: Vec::new(),
        }
    }

    /// Parameters whose name starts with `prefix` use lr * mult.
    pub fn set_lr_multiplier(&mut self, prefix: &str, mult: f64) {
        self.lr_multipliers.push((prefix.to_string(), mult));
    }

    fn lr_for(&self, name: &str) -> f64 {
        let mut lr = self.config.lr;
        for (prefix, mult) in &self.lr_multipliers {
            if name.starts_with(prefix.as_str()) {
                lr = self.config.lr * mult;
            }
        }
        lr
    }

    pub fn step(&mut self, params: &[Parameter]) -> Result<(), OptimError> {
        let c = self.config.clone();
        for p in params {
            let grad = p
                .tensor
                .grad()
                .ok_or_else(|| OptimError::MissingGrad(p.name.clone()))?;
            let lr = self.lr_for(&p.name);
            let n = grad.len();
            let st = self.state.entry(p.name.clone()).or_insert_with(|| MomentState {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            });
            st.step += 1;
            let bc1 = 1.0 - c.beta1.powi(st.step as i32);
            let bc2 = 1.0 - c.beta2.powi(st.step as i32);
            let mut data = p.tensor.data();
            for i in 0..n {
                let g = grad[i];
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                // Decoupled weight decay: applied to the weight directly,
                // not through the moments.
                data[i] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * data[i]);
            }
            p.tensor.set_data(data);
        }
        Ok(())
    }

    pub fn zero_grad(&self, params: &[Parameter]) {
        for p in params {
            p.tensor.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ops;
    use crate::diffcore::tensor::Parameter;

    #[test]
    fn zero_grad_zero_decay_leaves_weight_unchanged() {
        let p = Parameter::new("w", &[1], vec![1.0]);
        p.tensor.accumulate_grad(&[0.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(std::slice::from_ref(&p)).unwrap();
        assert_eq!(p.tensor.data(), vec![1.0]);
    }

    #[test]
    fn one_step_on_quadratic_descends() {
        let p = Parameter::new("w", &[1], vec![1.0]);
        let loss = ops::mul(&p.tensor, &p.tensor);
        ops::sum(&loss).backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            ..Default::default()
        });
        opt.step(std::slice::from_ref(&p)).unwrap();
        assert!(p.tensor.data()[0] < 1.0);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        // 200 steps on f(w) = (w - 3)^2 must land within 1e-2 of 3.
        let p = Parameter::new("w", &[1], vec![1.0]);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            ..Default::default()
        });
        for _ in 0..200 {
            p.tensor.zero_grad();
            let diff = ops::add(&p.tensor, &crate::diffcore::Tensor::scalar(-3.0));
            let loss = ops::sum(&ops::mul(&diff, &diff));
            loss.backward().unwrap();
            opt.step(std::slice::from_ref(&p)).unwrap();
        }
        assert!((p.tensor.data()[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn missing_grad_names_the_parameter() {
        let p = Parameter::new("layer0.weight", &[1], vec![1.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        match opt.step(std::slice::from_ref(&p)) {
            Err(OptimError::MissingGrad(name)) => assert_eq!(name, "layer0.weight"),
            other => panic!("expected MissingGrad, got {:?}", other.is_ok()),
        }
    }
}
