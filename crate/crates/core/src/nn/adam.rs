use ndarray::ArrayD;

use super::{Network, Real};
use crate::error::{Error, Result};

/// Adam with bias correction. Moment buffers follow the network's
/// parameter order.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    moments: Vec<(ArrayD<F>, ArrayD<F>)>,
}

impl<F: Real> Default for Adam<F> {
    fn default() -> Self {
        Adam::new(0.001, 0.9, 0.999)
    }
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam { lr, beta1, beta2, epsilon: 1e-8, step: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// Apply one update from the gradients accumulated by the last backward
    /// pass, then clear them.
    pub fn step(&mut self, net: &mut Network<F>) -> Result<()> {
        if !net.has_gradients() {
            return Err(Error::StepBeforeBackward);
        }
        self.step += 1;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let c1 = F::one() - F::of(self.beta1.powi(self.step));
        let c2 = F::one() - F::of(self.beta2.powi(self.step));
        let lr = F::of(self.lr);
        let eps = F::of(self.epsilon);
        let mut params = net.params_mut();
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())))
                .collect();
        }
        for (p, (m, v)) in params.iter_mut().zip(self.moments.iter_mut()) {
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (F::one() - b1) * g;
                    *v = b2 * *v + (F::one() - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *w -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        drop(params);
        net.zero_grad();
        Ok(())
    }
}
