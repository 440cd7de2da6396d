//! Adaptive-moment optimizer with bias correction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::GradientMap;

#[derive(Debug, Error)]
pub enum StepError {
    #[error("non-finite gradient; step aborted, parameters untouched")]
    AbortStep,
    #[error("gradient has {got} coordinates, optimizer tracks {want}")]
    ShapeMismatch { got: usize, want: usize },
}

/// First/second moment accumulators plus the step counter. `reset` zeroes
/// everything, which is what a reference reset wants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(len: usize, rate: f64) -> Self {
        OptimizerState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.step = 0;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn is_zeroed(&self) -> bool {
        self.step == 0 && self.m.iter().all(|&x| x == 0.0) && self.v.iter().all(|&x| x == 0.0)
    }
}

/// One update in place. A non-finite gradient aborts before any parameter
/// is touched.
pub fn adaptive_moment_step(
    params: &mut [f64],
    grads: &GradientMap,
    state: &mut OptimizerState,
) -> Result<(), StepError> {
    if grads.len() != params.len() || grads.len() != state.m.len() {
        return Err(StepError::ShapeMismatch {
            got: grads.len(),
            want: state.m.len(),
        });
    }
    if !grads.is_finite() {
        return Err(StepError::AbortStep);
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads.get(i);
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.rate * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_untouched() {
        let mut params = vec![1.0, -2.0, 0.5];
        let before = params.clone();
        let mut state = OptimizerState::new(3, 1e-2);
        adaptive_moment_step(&mut params, &GradientMap::zeros(3), &mut state).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn zero_rate_leaves_params_untouched() {
        let mut params = vec![1.0, -2.0];
        let before = params.clone();
        let mut state = OptimizerState::new(2, 0.0);
        let g = GradientMap::from_vec(vec![3.0, -4.0]);
        adaptive_moment_step(&mut params, &g, &mut state).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_moves_by_roughly_rate_times_sign() {
        let mut params = vec![0.0, 0.0];
        let mut state = OptimizerState::new(2, 1e-3);
        let g = GradientMap::from_vec(vec![0.7, -2.5]);
        adaptive_moment_step(&mut params, &g, &mut state).unwrap();
        // bias-corrected first step: m_hat = g, v_hat = g^2, so the update
        // is rate * g / (|g| + eps) = rate * sign(g) up to eps
        assert!((params[0] + 1e-3).abs() < 1e-7);
        assert!((params[1] - 1e-3).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut params = vec![1.0];
        let mut state = OptimizerState::new(1, 1e-2);
        let g = GradientMap::from_vec(vec![f64::NAN]);
        assert!(matches!(
            adaptive_moment_step(&mut params, &g, &mut state),
            Err(StepError::AbortStep)
        ));
        assert_eq!(params, vec![1.0]);
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn reset_zeroes_accumulators_and_counter() {
        let mut params = vec![1.0];
        let mut state = OptimizerState::new(1, 1e-2);
        let g = GradientMap::from_vec(vec![2.0]);
        adaptive_moment_step(&mut params, &g, &mut state).unwrap();
        assert!(!state.is_zeroed());
        state.reset();
        assert!(state.is_zeroed());
    }
}
