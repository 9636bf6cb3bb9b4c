use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_LEARNING_RATE: f32 = 1e-3;
pub const DEFAULT_BETA1: f32 = 0.9;
pub const DEFAULT_BETA2: f32 = 0.999;
pub const DEFAULT_EPSILON: f32 = 1e-8;

/// Bias-corrected Adam over a flat view of all parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f32>,
    pub second_moment: Vec<f32>,
    pub step_count: u64,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl AdamState {
    pub fn new(parameter_count: usize, learning_rate: f32) -> Self {
        AdamState {
            first_moment: vec![0.0; parameter_count],
            second_moment: vec![0.0; parameter_count],
            step_count: 0,
            learning_rate,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn with_defaults(parameter_count: usize) -> Self {
        AdamState::new(parameter_count, DEFAULT_LEARNING_RATE)
    }

    /// Applies one update to `params` (in order) and clears their gradients.
    ///
    /// Nothing is modified unless every parameter carries a gradient and the
    /// parameter total matches the state.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        let total: usize = params.iter().map(|p| p.numel()).sum();
        if total != self.first_moment.len() {
            return Err(Error::Contract(format!(
                "optimizer state tracks {} parameters but {total} were supplied",
                self.first_moment.len()
            )));
        }
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::Contract(format!(
                "parameter tensor {i} has no gradient"
            )));
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = (1.0 - (self.beta1 as f64).powi(t)) as f32;
        let bc2 = (1.0 - (self.beta2 as f64).powi(t)) as f32;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);

        let mut offset = 0;
        for p in params.iter_mut() {
            let grad = p.take_grad().expect("checked above");
            let n = grad.len();
            let m = &mut self.first_moment[offset..offset + n];
            let v = &mut self.second_moment[offset..offset + n];
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            offset += n;
        }
        Ok(())
    }
}
