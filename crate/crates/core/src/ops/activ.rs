//! Pointwise activations and their exact gradients.

use crate::element::Element;
use crate::tensor::Tensor;

pub fn relu<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| v.maxv(E::ZERO))
}

pub fn relu_backward<E: Element>(x: &Tensor<E>, gy: &Tensor<E>) -> Tensor<E> {
    // subgradient 0 at the kink
    gy.zip_map(x, |g, v| if v > E::ZERO { g } else { E::ZERO }).expect("shape")
}

pub fn leaky_relu<E: Element>(x: &Tensor<E>, slope: f64) -> Tensor<E> {
    let a = E::from_f64(slope);
    x.map(|v| if v > E::ZERO { v } else { a * v })
}

pub fn leaky_relu_backward<E: Element>(x: &Tensor<E>, gy: &Tensor<E>, slope: f64) -> Tensor<E> {
    let a = E::from_f64(slope);
    gy.zip_map(x, |g, v| if v > E::ZERO { g } else { a * g }).expect("shape")
}

pub fn tanh<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| v.tanh())
}

/// d tanh(x) = 1 - tanh(x)^2, expressed through the forward output.
pub fn tanh_backward<E: Element>(y: &Tensor<E>, gy: &Tensor<E>) -> Tensor<E> {
    gy.zip_map(y, |g, t| g * (E::ONE - t * t)).expect("shape")
}

pub fn sigmoid<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| E::ONE / (E::ONE + (-v).exp()))
}

pub fn sigmoid_backward<E: Element>(y: &Tensor<E>, gy: &Tensor<E>) -> Tensor<E> {
    gy.zip_map(y, |g, s| g * s * (E::ONE - s)).expect("shape")
}
