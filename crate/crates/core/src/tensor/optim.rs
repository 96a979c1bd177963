use serde::{Deserialize, Serialize};

use super::{ParameterSet, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Adam hyperparameters; the learning rate stays constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub hyper: Adam,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParameterSet<T>, hyper: Adam) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        OptimizerState { hyper, step: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update of every trainable parameter.
///
/// `grads` is aligned with `params`; non-trainable entries are ignored.
pub fn adam_step<T: Scalar>(
    params: &mut ParameterSet<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape("adam_step", format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if !p.trainable {
            continue;
        }
        match g {
            None => return Err(Error::MissingGradient(p.name.clone())),
            Some(g) if g.shape() != p.value.shape() => {
                return Err(Error::shape("adam_step", format!("gradient for `{}` is {}", p.name, g.shape())))
            }
            Some(_) => {}
        }
    }
    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let bc1 = T::c(1.0 - h.beta1.powi(t));
    let bc2 = T::c(1.0 - h.beta2.powi(t));
    let (b1, b2, lr, eps) = (T::c(h.beta1), T::c(h.beta2), T::c(h.lr), T::c(h.eps));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (true, Some(g)) = (p.trainable, g) else { continue };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
