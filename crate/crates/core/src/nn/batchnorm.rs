use ndarray::{Array1, Array4, ArrayD, Axis, IxDyn};

use super::{Mode, Param, Real};
use crate::error::{invalid, Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the current batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over `(batch, height, width)`.
#[derive(Debug, Clone)]
pub struct BatchNorm<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
}

/// Values saved by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache<F> {
    x_hat: Array4<F>,
    inv_std: Array1<F>,
    mode: Mode,
}

impl<F: Real> BatchNorm<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::new(ArrayD::zeros(IxDyn(&[channels]))),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    fn check(&self, x: &Array4<F>) -> Result<()> {
        if x.dim().1 != self.channels() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} channels", self.channels()),
                got: format!("{}", x.dim().1),
            });
        }
        Ok(())
    }

    /// Normalize with the running statistics; no state is touched.
    pub fn apply_eval(&self, x: &Array4<F>) -> Result<Array4<F>> {
        self.check(x)?;
        let eps = F::of(BN_EPSILON);
        let mut y = x.clone();
        for (c, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let scale = self.gamma.value[c] / (self.running_var[c] + eps).sqrt();
            let shift = self.beta.value[c] - self.running_mean[c] * scale;
            plane.mapv_inplace(|v| v * scale + shift);
        }
        Ok(y)
    }

    /// Forward pass recording a cache. In train mode the batch statistics
    /// are used and the running statistics updated.
    pub fn forward(&mut self, x: &Array4<F>, mode: Mode) -> Result<(Array4<F>, BnCache<F>)> {
        self.check(x)?;
        let (b, ch, h, w) = x.dim();
        let eps = F::of(BN_EPSILON);
        let (mean, var) = match mode {
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
            Mode::Train => {
                if b < 2 {
                    return Err(invalid("batch normalization in train mode needs batch >= 2"));
                }
                let n = F::of((b * h * w) as f64);
                let mut mean = Array1::zeros(ch);
                let mut var = Array1::zeros(ch);
                for (c, plane) in x.axis_iter(Axis(1)).enumerate() {
                    let m = plane.iter().copied().sum::<F>() / n;
                    let v = plane.iter().map(|&v| (v - m) * (v - m)).sum::<F>() / n;
                    mean[c] = m;
                    var[c] = v;
                }
                let mom = F::of(BN_MOMENTUM);
                let unbias = n / (n - F::one()).max(F::one());
                for c in 0..ch {
                    self.running_mean[c] = (F::one() - mom) * self.running_mean[c] + mom * mean[c];
                    self.running_var[c] =
                        (F::one() - mom) * self.running_var[c] + mom * var[c] * unbias;
                }
                (mean, var)
            }
        };
        let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
        let mut x_hat = x.clone();
        for (c, mut plane) in x_hat.axis_iter_mut(Axis(1)).enumerate() {
            let (m, s) = (mean[c], inv_std[c]);
            plane.mapv_inplace(|v| (v - m) * s);
        }
        let mut y = x_hat.clone();
        for (c, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let (g, bt) = (self.gamma.value[c], self.beta.value[c]);
            plane.mapv_inplace(|v| v * g + bt);
        }
        Ok((y, BnCache { x_hat, inv_std, mode }))
    }

    pub fn backward(&mut self, cache: &BnCache<F>, dy: &Array4<F>) -> Result<Array4<F>> {
        if dy.dim() != cache.x_hat.dim() {
            return Err(Error::DimensionMismatch {
                expected: format!("{:?}", cache.x_hat.dim()),
                got: format!("{:?}", dy.dim()),
            });
        }
        let (b, _, h, w) = dy.dim();
        let n = F::of((b * h * w) as f64);
        let mut dx = dy.clone();
        for (c, mut dplane) in dx.axis_iter_mut(Axis(1)).enumerate() {
            let xh = cache.x_hat.index_axis(Axis(1), c);
            let dyc = dy.index_axis(Axis(1), c);
            let sum_dy = dyc.sum();
            let sum_dy_xh = dyc.iter().zip(xh.iter()).map(|(&g, &v)| g * v).sum::<F>();
            self.gamma.grad[c] += sum_dy_xh;
            self.beta.grad[c] += sum_dy;
            let g = self.gamma.value[c];
            let s = cache.inv_std[c];
            match cache.mode {
                Mode::Eval => dplane.mapv_inplace(|d| d * g * s),
                Mode::Train => {
                    let k = g * s / n;
                    ndarray::Zip::from(&mut dplane).and(&xh).for_each(|d, &v| {
                        *d = k * (n * *d - sum_dy - v * sum_dy_xh);
                    });
                }
            }
        }
        Ok(dx)
    }
}
