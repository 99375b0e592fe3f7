//! Adaptive moment estimation.

use serde::{Deserialize, Serialize};

use super::model::{Gradients, Predictor};
use super::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state: first and second moments shaped like the gradients.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Gradients<T>,
    v: Gradients<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(model: &Predictor<T>, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: model.zero_gradients(),
            v: model.zero_gradients(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update.
    pub fn step(&mut self, model: &mut Predictor<T>, grads: &Gradients<T>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one, eps) = (T::one(), T::of(c.epsilon));
        let lr = T::of(c.learning_rate);
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let update = |p: &mut [T], g: &[T], m: &mut [T], v: &mut [T]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        };
        for (((layer, (gw, gb)), (mw, mb)), (vw, vb)) in model
            .layers_mut()
            .into_iter()
            .zip(&grads.layers)
            .zip(&mut self.m.layers)
            .zip(&mut self.v.layers)
        {
            update(&mut layer.weight, gw, mw, vw);
            update(&mut layer.bias, gb, mb, vb);
        }
    }
}
