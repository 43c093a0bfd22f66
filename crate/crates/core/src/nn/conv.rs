use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, ArrayView3, ArrayViewMut2, Axis, CowArray, Ix2, IxDyn};
use rand::Rng;

use super::{Param, Real};
use crate::error::{Error, Result};

/// Valid (unpadded), stride-1 convolution with a square kernel.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    /// `(c_out, c_in * k * k)`, column index `c * k * k + ky * k + kx`.
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Real> Conv2d<F> {
    pub fn zeros(kernel: usize, c_in: usize, c_out: usize) -> Self {
        Conv2d {
            kernel,
            c_in,
            c_out,
            weight: Param::new(ndarray::ArrayD::zeros(IxDyn(&[c_out, c_in * kernel * kernel]))),
            bias: Param::new(ndarray::ArrayD::zeros(IxDyn(&[c_out]))),
        }
    }

    /// Uniform fan-in (He) initialization, zero bias.
    pub fn he_uniform<R: Rng>(kernel: usize, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let mut conv = Self::zeros(kernel, c_in, c_out);
        let bound = (6.0 / (c_in * kernel * kernel) as f64).sqrt();
        conv.weight.value.mapv_inplace(|_| F::of(rng.gen_range(-bound..bound)));
        conv
    }

    pub fn weight_matrix(&self) -> ArrayView2<'_, F> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-D weight")
    }

    fn check(&self, x: &Array4<F>) -> Result<(usize, usize)> {
        let (_, c, h, w) = x.dim();
        if c != self.c_in {
            return Err(Error::DimensionMismatch {
                expected: format!("{} input channels", self.c_in),
                got: format!("{c}"),
            });
        }
        if h < self.kernel || w < self.kernel {
            return Err(Error::DimensionMismatch {
                expected: format!("spatial size >= {}", self.kernel),
                got: format!("{h}x{w}"),
            });
        }
        Ok((h - self.kernel + 1, w - self.kernel + 1))
    }

    pub fn forward(&self, x: &Array4<F>) -> Result<Array4<F>> {
        let (ho, wo) = self.check(x)?;
        let b = x.dim().0;
        let wm = self.weight_matrix();
        let bias = self.bias.value.as_slice().expect("contiguous bias");
        let mut y = Array4::<F>::zeros((b, self.c_out, ho, wo));
        for (xb, mut yb) in x.outer_iter().zip(y.outer_iter_mut()) {
            let col = self.columns(xb);
            let mut yb2 = yb
                .view_mut()
                .into_shape_with_order((self.c_out, ho * wo))
                .expect("contiguous output");
            for (mut row, &bv) in yb2.outer_iter_mut().zip(bias) {
                row.fill(bv);
            }
            general_mat_mul(F::one(), &wm, &col, F::one(), &mut yb2);
        }
        Ok(y)
    }

    /// Accumulate parameter gradients for input `x` and output gradient `dy`;
    /// returns the input gradient.
    pub fn backward(&mut self, x: &Array4<F>, dy: &Array4<F>) -> Result<Array4<F>> {
        let (ho, wo) = self.check(x)?;
        let (b, _, h, w) = x.dim();
        if dy.dim() != (b, self.c_out, ho, wo) {
            return Err(Error::DimensionMismatch {
                expected: format!("{:?}", (b, self.c_out, ho, wo)),
                got: format!("{:?}", dy.dim()),
            });
        }
        let mut dx = Array4::<F>::zeros((b, self.c_in, h, w));
        let kk = self.kernel * self.kernel;
        let mut dw = Array2::<F>::zeros((self.c_out, self.c_in * kk));
        let mut dcol = Array2::<F>::zeros((self.c_in * kk, ho * wo));
        let mut db = vec![F::zero(); self.c_out];
        let wm = self.weight_matrix();
        for ((xb, dyb), mut dxb) in x.outer_iter().zip(dy.outer_iter()).zip(dx.outer_iter_mut()) {
            let dy2 = dyb.into_shape_with_order((self.c_out, ho * wo)).expect("contiguous");
            for (g, row) in db.iter_mut().zip(dy2.outer_iter()) {
                *g += row.sum();
            }
            let col = self.columns(xb);
            general_mat_mul(F::one(), &dy2, &col.t(), F::one(), &mut dw);
            let mut dx2 = dxb.view_mut().into_shape_with_order((self.c_in, h * w)).expect("contiguous");
            if self.kernel == 1 {
                general_mat_mul(F::one(), &wm.t(), &dy2, F::zero(), &mut dx2);
            } else {
                general_mat_mul(F::one(), &wm.t(), &dy2, F::zero(), &mut dcol);
                self.scatter_columns(&dcol, dx2, h, w);
            }
        }
        for (g, d) in self.bias.grad.iter_mut().zip(db) {
            *g += d;
        }
        let mut gw = self.weight.grad.view_mut().into_dimensionality::<Ix2>().expect("2-D grad");
        gw += &dw;
        Ok(dx)
    }

    /// im2col of one `(c, h, w)` item into `(c * k * k, ho * wo)`.
    fn columns<'a>(&self, x: ArrayView3<'a, F>) -> CowArray<'a, F, Ix2> {
        let (c, h, w) = x.dim();
        let k = self.kernel;
        if k == 1 {
            return match x.into_shape_with_order((c, h * w)) {
                Ok(v) => v.into(),
                Err(_) => x.to_shape((c, h * w)).expect("reshape").into_owned().into(),
            };
        }
        let (ho, wo) = (h - k + 1, w - k + 1);
        let mut col = Array2::<F>::zeros((c * k * k, ho * wo));
        let xs = x.as_standard_layout();
        let src = xs.as_slice().expect("standard layout");
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let mut row = col.index_axis_mut(Axis(0), ci * k * k + ky * k + kx);
                    let dst = row.as_slice_mut().expect("contiguous row");
                    for oy in 0..ho {
                        let s = ci * h * w + (oy + ky) * w + kx;
                        dst[oy * wo..(oy + 1) * wo].copy_from_slice(&src[s..s + wo]);
                    }
                }
            }
        }
        col.into()
    }

    /// col2im: add `(c * k * k, ho * wo)` column gradients into `(c, h * w)`.
    fn scatter_columns(&self, dcol: &Array2<F>, mut dx: ArrayViewMut2<'_, F>, h: usize, w: usize) {
        let k = self.kernel;
        let (ho, wo) = (h - k + 1, w - k + 1);
        for ci in 0..self.c_in {
            let mut plane = dx.index_axis_mut(Axis(0), ci);
            let dst = plane.as_slice_mut().expect("contiguous plane");
            for ky in 0..k {
                for kx in 0..k {
                    let row = dcol.index_axis(Axis(0), ci * k * k + ky * k + kx);
                    let src = row.as_slice().expect("contiguous row");
                    for oy in 0..ho {
                        let d = (oy + ky) * w + kx;
                        for (a, &g) in dst[d..d + wo].iter_mut().zip(&src[oy * wo..(oy + 1) * wo]) {
                            *a += g;
                        }
                    }
                }
            }
        }
    }
}
