//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Encoder learning rate used for collaborative training.
pub const TRAIN_LR: f64 = 1e-4;
/// Encoder moment decay rates used for collaborative training.
pub const TRAIN_BETAS: (f64, f64) = (0.5, 0.999);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8 }
    }

    /// The encoder-training defaults: lr 1e−4, betas (0.5, 0.999).
    pub fn trainer_default() -> Self {
        Self::new(TRAIN_LR, TRAIN_BETAS.0, TRAIN_BETAS.1)
    }
}

/// First and second moment estimates for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S: Scalar = f32> {
    pub step: u64,
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<S>>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(|p| p.len()).collect();
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[&Tensor<S>],
    state: &mut AdamState<S>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return Err(Error::Shape(format!(
                "adam: param {i} {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        g.check_finite(&format!("adam gradient {i}"))?;
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = S::from_f64(cfg.beta1);
    let b2 = S::from_f64(cfg.beta2);
    let one = S::one();
    let bc1 = S::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = S::from_f64(1.0 - cfg.beta2.powi(t));
    let lr = S::from_f64(cfg.lr);
    let eps = S::from_f64(cfg.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * gr;
            *vi = b2 * *vi + (one - b2) * gr * gr;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
