use ndarray::Array4;

use super::Real;
use crate::error::{Error, Result};

/// Mean squared error over all elements and its gradient w.r.t. `pred`.
pub fn mse_loss<F: Real>(pred: &Array4<F>, target: &Array4<F>) -> Result<(F, Array4<F>)> {
    if pred.dim() != target.dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("{:?}", target.dim()),
            got: format!("{:?}", pred.dim()),
        });
    }
    let n = F::of(pred.len() as f64);
    let diff = pred - target;
    let loss = diff.iter().map(|&d| d * d).sum::<F>() / n;
    let grad = diff * (F::of(2.0) / n);
    Ok((loss, grad))
}

/// Mean squared error over the voxels where `mask` is set, in every channel.
/// `mask` has shape `(batch, 1, height, width)`. An empty mask gives zero
/// loss and gradient.
pub fn masked_mse_loss<F: Real>(
    pred: &Array4<F>,
    target: &Array4<F>,
    mask: &Array4<bool>,
) -> Result<(F, Array4<F>)> {
    let (b, c, h, w) = pred.dim();
    if target.dim() != pred.dim() || mask.dim() != (b, 1, h, w) {
        return Err(Error::DimensionMismatch {
            expected: format!("{:?} with mask {:?}", pred.dim(), (b, 1, h, w)),
            got: format!("{:?} with mask {:?}", target.dim(), mask.dim()),
        });
    }
    let count = mask.iter().filter(|&&m| m).count() * c;
    let mut grad = Array4::zeros(pred.dim());
    if count == 0 {
        return Ok((F::zero(), grad));
    }
    let n = F::of(count as f64);
    let mut loss = F::zero();
    for ((i, ch, y, x), g) in grad.indexed_iter_mut() {
        if mask[(i, 0, y, x)] {
            let d = pred[(i, ch, y, x)] - target[(i, ch, y, x)];
            loss += d * d;
            *g = F::of(2.0) * d / n;
        }
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_inputs_have_zero_loss_and_gradient() {
        let a = Array4::<f64>::from_shape_fn((2, 3, 4, 4), |(i, j, k, l)| (i + j * k + l) as f64);
        let (loss, grad) = mse_loss(&a, &a).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn known_value() {
        let p = Array4::<f64>::from_elem((1, 1, 2, 2), 1.0);
        let t = Array4::<f64>::zeros((1, 1, 2, 2));
        let (loss, grad) = mse_loss(&p, &t).unwrap();
        assert_eq!(loss, 1.0);
        assert!(grad.iter().all(|&g| g == 0.5));
        assert!(mse_loss(&p, &Array4::zeros((1, 2, 2, 2))).is_err());
    }

    #[test]
    fn masked_loss_ignores_unmasked_voxels() {
        let p = Array4::<f64>::from_shape_fn((1, 2, 2, 2), |(_, c, y, x)| (c + y + x) as f64);
        let t = Array4::<f64>::zeros((1, 2, 2, 2));
        let mut m = Array4::from_elem((1, 1, 2, 2), false);
        m[(0, 0, 1, 1)] = true;
        let (loss, grad) = masked_mse_loss(&p, &t, &m).unwrap();
        // channel values at (1, 1) are 2 and 3
        assert_eq!(loss, (4.0 + 9.0) / 2.0);
        assert_eq!(grad[(0, 1, 1, 1)], 3.0);
        assert_eq!(grad[(0, 0, 0, 1)], 0.0);
        let full = Array4::from_elem((1, 1, 2, 2), true);
        assert_eq!(masked_mse_loss(&p, &t, &full).unwrap().0, mse_loss(&p, &t).unwrap().0);
        let none = Array4::from_elem((1, 1, 2, 2), false);
        assert_eq!(masked_mse_loss(&p, &t, &none).unwrap().0, 0.0);
    }
}
