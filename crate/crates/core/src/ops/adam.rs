//! Adam optimizer with bias-corrected moment estimates.

use crate::element::Element;
use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

/// First/second moment buffers for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<E: Element> {
    pub m: Tensor<E>,
    pub v: Tensor<E>,
}

impl<E: Element> AdamState<E> {
    pub fn new(shape: &[usize]) -> Self {
        AdamState { m: Tensor::zeros(shape), v: Tensor::zeros(shape) }
    }
}

/// One update; `t` is the 1-based global step used for bias correction.
pub fn adam_step<E: Element>(
    param: &mut Tensor<E>,
    grad: &Tensor<E>,
    state: &mut AdamState<E>,
    cfg: &AdamConfig,
    t: u64,
) {
    debug_assert_eq!(param.shape(), grad.shape());
    let b1 = E::from_f64(cfg.beta1);
    let b2 = E::from_f64(cfg.beta2);
    let one_m_b1 = E::ONE - b1;
    let one_m_b2 = E::ONE - b2;
    // lr_t = lr * sqrt(1 - b2^t) / (1 - b1^t)
    let corr = cfg.lr * (1.0 - cfg.beta2.powi(t as i32)).sqrt() / (1.0 - cfg.beta1.powi(t as i32));
    let lr_t = E::from_f64(corr);
    let eps = E::from_f64(ADAM_EPS);
    let (p, g) = (param.data_mut(), grad.data());
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for i in 0..p.len() {
        m[i] = b1 * m[i] + one_m_b1 * g[i];
        v[i] = b2 * v[i] + one_m_b2 * g[i] * g[i];
        p[i] -= lr_t * m[i] / (v[i].sqrt() + eps);
    }
}
