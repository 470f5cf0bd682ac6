use serde::{Deserialize, Serialize};

use super::{NumericsError, Tensor2};

/// Optimizer hyperparameters. Defaults: lr 0.01, β₁ = β₂ = 0.9, ε = 1e-8,
/// no weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// Per-tensor Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Tensor2,
    pub v: Tensor2,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, config: AdamConfig) -> Self {
        Self {
            step: 0,
            m: Tensor2::zeros(rows, cols),
            v: Tensor2::zeros(rows, cols),
            config,
        }
    }

    pub fn for_param(param: &Tensor2, config: AdamConfig) -> Self {
        Self::new(param.rows(), param.cols(), config)
    }

    /// One bias-corrected Adam update of `param` in place.
    pub fn step(&mut self, param: &mut Tensor2, grad: &Tensor2) -> Result<(), NumericsError> {
        param.check_same_shape("adam_step", grad)?;
        self.m.check_same_shape("adam_step(state)", param)?;
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let m = self.m.data_mut();
        let v = self.v.data_mut();
        for (((p, &g), mi), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        if !param.is_finite() {
            return Err(NumericsError::NonFinite { op: "adam_step" });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let mut p = Tensor2::row_vector(&[1.0, -2.0, 3.5]);
        let before = p.clone();
        let mut st = AdamState::for_param(&p, AdamConfig::default());
        for _ in 0..5 {
            st.step(&mut p, &Tensor2::zeros(1, 3)).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε) ≈ lr for g = 1.
        let mut p = Tensor2::row_vector(&[0.5]);
        let mut st = AdamState::for_param(&p, AdamConfig::default());
        st.step(&mut p, &Tensor2::row_vector(&[1.0])).unwrap();
        let expected = 0.5 - 0.01 * 1.0 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = Tensor2::row_vector(&[0.1, 0.2]);
            let mut st = AdamState::for_param(&p, AdamConfig::default());
            for i in 0..10 {
                let g = Tensor2::row_vector(&[(i as f64).sin(), (i as f64 * 0.7).cos()]);
                st.step(&mut p, &g).unwrap();
            }
            p
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor2::zeros(2, 2);
        let mut st = AdamState::for_param(&p, AdamConfig::default());
        assert!(st.step(&mut p, &Tensor2::zeros(1, 4)).is_err());
    }
}
