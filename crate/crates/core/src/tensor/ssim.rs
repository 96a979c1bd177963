//! Structural similarity built from differentiable tape primitives.
//!
//! Gaussian window 11×11, σ = 1.5, stabilizers `C1 = 0.01²`, `C2 = 0.03²`
//! for a dynamic range of 1. Only windows fully inside the image are used.

use super::kernels::{self, gaussian_window, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
use super::{Shape, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn window<T: Scalar>() -> Vec<T> {
    gaussian_window(SSIM_WINDOW, SSIM_SIGMA).into_iter().map(T::c).collect()
}

impl<T: Scalar> Tape<T> {
    /// Per-window SSIM map of shape `N×C×(H-10)×(W-10)`.
    pub fn ssim_map(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.shape(a);
        if s != self.shape(b) {
            return Err(Error::shape("ssim", format!("{} vs {}", s, self.shape(b))));
        }
        if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
            return Err(Error::shape(
                "ssim",
                format!("window {SSIM_WINDOW} larger than image {}x{}", s.h, s.w),
            ));
        }
        let k = window::<T>();
        let mu_a = self.filter_valid(a, &k)?;
        let mu_b = self.filter_valid(b, &k)?;
        let aa = self.square(a);
        let bb = self.square(b);
        let ab = self.mul(a, b)?;
        let e_aa = self.filter_valid(aa, &k)?;
        let e_bb = self.filter_valid(bb, &k)?;
        let e_ab = self.filter_valid(ab, &k)?;
        let mu_aa = self.square(mu_a);
        let mu_bb = self.square(mu_b);
        let mu_ab = self.mul(mu_a, mu_b)?;
        let var_a = self.sub(e_aa, mu_aa)?;
        let var_b = self.sub(e_bb, mu_bb)?;
        let cov = self.sub(e_ab, mu_ab)?;

        let (c1, c2, two) = (T::c(SSIM_C1), T::c(SSIM_C2), T::c(2.0));
        let l_num = self.scale(mu_ab, two);
        let l_num = self.offset(l_num, c1);
        let c_num = self.scale(cov, two);
        let c_num = self.offset(c_num, c2);
        let l_den = self.add(mu_aa, mu_bb)?;
        let l_den = self.offset(l_den, c1);
        let c_den = self.add(var_a, var_b)?;
        let c_den = self.offset(c_den, c2);
        let num = self.mul(l_num, c_num)?;
        let den = self.mul(l_den, c_den)?;
        self.div(num, den)
    }

    /// Mean SSIM over all valid windows.
    pub fn ssim(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = self.ssim_map(a, b)?;
        Ok(self.mean(map))
    }

    /// Mean SSIM over windows lying entirely inside `mask` (`N×1×H×W`).
    pub fn masked_ssim(&mut self, a: Var, b: Var, mask: &Tensor<T>) -> Result<Var> {
        let map = self.ssim_map(a, b)?;
        let window_mask = ssim_window_mask(mask)?;
        self.masked_mean(map, &window_mask)
    }
}

/// 1 where the whole SSIM window centred there lies inside `mask`.
pub fn ssim_window_mask<T: Scalar>(mask: &Tensor<T>) -> Result<Tensor<T>> {
    let s = mask.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::shape("ssim", format!("window {SSIM_WINDOW} larger than mask {}x{}", s.h, s.w)));
    }
    let k = window::<f64>();
    let m: Vec<f64> = mask.data().iter().map(|v| v.f64()).collect();
    let ones = vec![1.0; SSIM_WINDOW * SSIM_WINDOW];
    let full = kernels::filter_valid(&ones, 1, SSIM_WINDOW, SSIM_WINDOW, &k)[0];
    let cover = kernels::filter_valid(&m, s.n * s.c, s.h, s.w, &k);
    let data = cover.into_iter().map(|v| if v >= full * (1.0 - 1e-9) { T::one() } else { T::zero() }).collect();
    Tensor::new(Shape::new(s.n, s.c, s.h + 1 - SSIM_WINDOW, s.w + 1 - SSIM_WINDOW), data)
}
