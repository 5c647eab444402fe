//! Named trainable parameters with attached gradient and optimizer state.
//! Networks hand out `&mut Param` lists; the optimizer walks them in
//! declaration order so updates are deterministic.

use crate::element::Element;
use crate::ops::adam::{adam_step, AdamConfig, AdamState};
use crate::tensor::Tensor;

/// One trainable tensor: value, gradient accumulator, Adam moments.
pub struct Param<E: Element> {
    pub name: String,
    pub value: Tensor<E>,
    pub grad: Tensor<E>,
    pub adam: AdamState<E>,
}

impl<E: Element> Param<E> {
    pub fn new(name: &str, value: Tensor<E>) -> Self {
        let grad = Tensor::zeros(value.shape());
        let adam = AdamState::new(value.shape());
        Param { name: name.to_string(), value, grad, adam }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = E::ZERO);
    }

    /// Accumulate a gradient contribution (shapes must match).
    pub fn add_grad(&mut self, g: &Tensor<E>) {
        debug_assert_eq!(self.grad.shape(), g.shape(), "grad shape for {}", self.name);
        let gd = self.grad.data_mut();
        for (a, &b) in gd.iter_mut().zip(g.data()) {
            *a += b;
        }
    }
}

/// Anything with trainable parameters and (optionally) non-trainable
/// buffers that belong in a checkpoint, e.g. spectral-norm iterates.
pub trait Net<E: Element> {
    fn params(&mut self) -> Vec<&mut Param<E>>;
    fn buffers(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        Vec::new()
    }
}

/// Adam over one network's parameter list. `t` counts optimizer steps and
/// drives bias correction for every parameter uniformly.
pub struct Optimizer {
    pub cfg: AdamConfig,
    pub t: u64,
}

impl Optimizer {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Optimizer { cfg: AdamConfig { lr, beta1, beta2 }, t: 0 }
    }

    pub fn zero_grad<E: Element>(&self, net: &mut dyn Net<E>) {
        for p in net.params() {
            p.zero_grad();
        }
    }

    pub fn step<E: Element>(&mut self, net: &mut dyn Net<E>) {
        self.t += 1;
        for p in net.params() {
            adam_step(&mut p.value, &p.grad, &mut p.adam, &self.cfg, self.t);
        }
    }
}

/// Largest absolute parameter value across the network — cheap finiteness
/// and stability probe for long training runs.
pub fn param_abs_max<E: Element>(net: &mut dyn Net<E>) -> f64 {
    let mut worst = 0.0f64;
    for p in net.params() {
        let m = p.value.abs_max().to_f64();
        if m > worst {
            worst = m;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Toy {
        w: Param<f64>,
    }

    impl Net<f64> for Toy {
        fn params(&mut self) -> Vec<&mut Param<f64>> {
            vec![&mut self.w]
        }
    }

    #[test]
    fn optimizer_descends_a_quadratic() {
        let mut net = Toy { w: Param::new("w", Tensor::new(&[2], vec![3.0, -2.0]).unwrap()) };
        let mut opt = Optimizer::new(0.1, 0.9, 0.999);
        for _ in 0..400 {
            opt.zero_grad(&mut net);
            let g: Vec<f64> = net.w.value.data().iter().map(|&x| 2.0 * x).collect();
            let g = Tensor::new(&[2], g).unwrap();
            net.w.add_grad(&g);
            opt.step(&mut net);
        }
        assert!(net.w.value.abs_max() < 1e-3, "should reach the minimum");
    }

    #[test]
    fn zero_grad_resets_accumulation() {
        let mut p = Param::new("p", Tensor::<f64>::zeros(&[3]));
        p.add_grad(&Tensor::full(&[3], 2.0));
        p.add_grad(&Tensor::full(&[3], 1.0));
        assert_eq!(p.grad.data(), &[3.0, 3.0, 3.0]);
        p.zero_grad();
        assert_eq!(p.grad.data(), &[0.0, 0.0, 0.0]);
    }
}
