//! Adam with bias correction and decoupled weight decay.

use crate::error::{AeslError, Result};
use crate::numerics::matrix::Matrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay, applied directly to parameters.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.9999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Matrix,
    v: Matrix,
}

/// Optimizer state. One moment slot per parameter, in the caller's declared
/// parameter order; new slots may be appended when the model grows.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    slots: Vec<Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            slots: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// Appends zero moment buffers for parameters beyond the current slots.
    pub fn ensure_slots(&mut self, params: &[&Matrix]) {
        for p in params.iter().skip(self.slots.len()) {
            self.slots.push(Moments {
                m: Matrix::zeros(p.rows(), p.cols()),
                v: Matrix::zeros(p.rows(), p.cols()),
            });
        }
    }

    /// One optimizer step over the full parameter list. Gradients may be
    /// `None` for parameters that did not participate in the loss.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Option<Matrix>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(AeslError::invalid(format!(
                "adam: {} params but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        {
            let borrowed: Vec<&Matrix> = params.iter().map(|p| &**p).collect();
            self.ensure_slots(&borrowed);
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);

        for (idx, param) in params.iter_mut().enumerate() {
            let slot = &mut self.slots[idx];
            if slot.m.shape() != param.shape() {
                return Err(AeslError::ShapeMismatch {
                    op: "adam_step",
                    left_rows: slot.m.rows(),
                    left_cols: slot.m.cols(),
                    right_rows: param.rows(),
                    right_cols: param.cols(),
                });
            }
            let zero;
            let grad = match &grads[idx] {
                Some(g) => {
                    if g.shape() != param.shape() {
                        return Err(AeslError::ShapeMismatch {
                            op: "adam_step",
                            left_rows: param.rows(),
                            left_cols: param.cols(),
                            right_rows: g.rows(),
                            right_cols: g.cols(),
                        });
                    }
                    g
                }
                None => {
                    zero = Matrix::zeros(param.rows(), param.cols());
                    &zero
                }
            };
            let p = param.as_mut_slice();
            let m = slot.m.as_mut_slice();
            let v = slot.v.as_mut_slice();
            let g = grad.as_slice();
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= c.learning_rate * (m_hat / (v_hat.sqrt() + c.epsilon));
                p[i] -= c.learning_rate * c.weight_decay * p[i];
            }
        }
        Ok(())
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.beta1 && self.beta1 < 1.0) || !(0.0 < self.beta2 && self.beta2 < 1.0) {
            return Err(AeslError::invalid("adam betas must lie in (0, 1)"));
        }
        if self.learning_rate <= 0.0 {
            return Err(AeslError::invalid("adam learning rate must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(AeslError::invalid("adam weight decay must be non-negative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> AdamConfig {
        AdamConfig {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.9999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut state = AdamState::new(config());
        let mut p = Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let before = p.clone();
        state
            .step(&mut [&mut p], &[Some(Matrix::zeros(1, 2))])
            .unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        // With bias correction the first update is -lr * g / (|g| + eps).
        let mut state = AdamState::new(config());
        let mut p = Matrix::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let g = Matrix::from_rows(&[vec![0.5, -2.0]]).unwrap();
        state.step(&mut [&mut p], &[Some(g)]).unwrap();
        let expected = |gi: f64| -0.01 * gi / (gi.abs() + 1e-8);
        assert!((p.get(0, 0) - expected(0.5)).abs() < 1e-12);
        assert!((p.get(0, 1) - expected(-2.0)).abs() < 1e-12);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || {
            let mut state = AdamState::new(config());
            let mut p = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
            for step in 1..=10 {
                let g = p.scale(0.1 * step as f64);
                state.step(&mut [&mut p], &[Some(g)]).unwrap();
            }
            p
        };
        let a = run();
        let b = run();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn step_counter_increments_by_one() {
        let mut state = AdamState::new(config());
        let mut p = Matrix::zeros(2, 2);
        for expected in 1..=3 {
            state
                .step(&mut [&mut p], &[Some(Matrix::filled(2, 2, 1.0))])
                .unwrap();
            assert_eq!(state.step_count(), expected);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut state = AdamState::new(config());
        let mut p = Matrix::zeros(2, 2);
        let bad = Matrix::zeros(1, 2);
        assert!(state.step(&mut [&mut p], &[Some(bad)]).is_err());
    }

    #[test]
    fn weight_decay_shrinks_params_without_gradient_signal() {
        let mut cfg = config();
        cfg.weight_decay = 0.1;
        let mut state = AdamState::new(cfg);
        let mut p = Matrix::from_rows(&[vec![1.0]]).unwrap();
        state
            .step(&mut [&mut p], &[Some(Matrix::zeros(1, 1))])
            .unwrap();
        assert!((p.get(0, 0) - (1.0 - 0.01 * 0.1)).abs() < 1e-12);
    }
}
