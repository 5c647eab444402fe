//! Frozen random feature pyramid for the perceptual loss. A pretrained
//! backbone is out of reach here, so a seed-fixed random conv stack stands
//! in: random frozen features still induce a valid distance for relative
//! comparisons. Reports that quote this metric state the substitution.

use crate::element::Element;
use crate::nets::layers::{Conv2d, Init};
use crate::ops::activ::{leaky_relu, leaky_relu_backward};
use crate::rng::stream;
use crate::tensor::Tensor;

/// The pyramid's weights derive from this fixed seed, never from run
/// configuration, so every process sees the same metric.
const FEATURE_SEED: u64 = 0x00AD_BEEF;
const SLOPE: f64 = 0.2;

/// Five frozen conv layers: an injective 1x1 expansion followed by four
/// stride-2 3x3 stages. Activations after each stage are the features.
pub struct FeatureExtractor<E: Element> {
    convs: Vec<Conv2d<E>>,
    /// Pre-activation outputs of the latest `features` call.
    pre: Vec<Tensor<E>>,
}

impl<E: Element> FeatureExtractor<E> {
    pub fn new() -> Self {
        let mut r = stream(FEATURE_SEED, "frozen-feature-pyramid");
        let widths = [8usize, 16, 16, 16, 16];
        let mut convs = Vec::with_capacity(5);
        convs.push(Conv2d::new(&mut r, "f0", 3, widths[0], 1, 1, 0, Init::He));
        for i in 1..5 {
            convs.push(Conv2d::new(&mut r, &format!("f{i}"), widths[i - 1], widths[i], 3, 2, 1, Init::He));
        }
        FeatureExtractor { convs, pre: Vec::new() }
    }

    /// Feature maps for `x`; caches enough to push gradients back to `x`.
    pub fn features(&mut self, x: &Tensor<E>) -> Vec<Tensor<E>> {
        self.pre.clear();
        let mut h = x.clone();
        let mut feats = Vec::with_capacity(self.convs.len());
        for conv in &mut self.convs {
            let p = conv.forward(&h);
            h = leaky_relu(&p, SLOPE);
            self.pre.push(p);
            feats.push(h.clone());
        }
        feats
    }

    /// Input gradient for per-feature gradients `g_feats` (aligned with the
    /// `features` output of the latest call). Weights stay frozen.
    pub fn backward_input(&self, g_feats: &[Tensor<E>]) -> Tensor<E> {
        assert_eq!(g_feats.len(), self.convs.len());
        let last = self.convs.len() - 1;
        let mut g = g_feats[last].clone();
        for i in (0..=last).rev() {
            let g_pre = leaky_relu_backward(&self.pre[i], &g, SLOPE);
            let g_in = self.convs[i].backward_input(&g_pre);
            if i == 0 {
                return g_in;
            }
            g = g_in;
            g.add_scaled_assign(&g_feats[i - 1], E::ONE);
        }
        unreachable!()
    }

    /// Perceptual distance Σ_i (1/R_i)·‖F_i(a) − F_i(b)‖₁ with R_i the
    /// element count of layer i; returns the gradient with respect to `a`.
    pub fn perceptual(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> (E, Tensor<E>) {
        assert_eq!(a.shape(), b.shape(), "perceptual operands must share a shape");
        let fb = self.features(b); // b first: leave a's caches in place
        let fa = self.features(a);
        let mut loss = E::ZERO;
        let mut gsigns = Vec::with_capacity(fa.len());
        for (xa, xb) in fa.iter().zip(fb.iter()) {
            let r = E::from_usize(xa.numel());
            let mut g = Tensor::zeros(xa.shape());
            for ((o, &va), &vb) in g.data_mut().iter_mut().zip(xa.data()).zip(xb.data()) {
                let d = va - vb;
                loss += d.abs() / r;
                *o = if d > E::ZERO {
                    E::ONE / r
                } else if d < E::ZERO {
                    -(E::ONE) / r
                } else {
                    E::ZERO
                };
            }
            gsigns.push(g);
        }
        (loss, self.backward_input(&gsigns))
    }
}

impl<E: Element> Default for FeatureExtractor<E> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::gradcheck::{check_grad, GRADCHECK_EPS, GRADCHECK_TOL};
    use crate::rng::{self, stream};

    #[test]
    fn identical_inputs_give_zero_and_symmetric_distance() {
        let mut f = FeatureExtractor::<f64>::new();
        let mut r = stream(51, "percept");
        let a = rng::randn::<f64>(&mut r, &[1, 3, 16, 16], 0.5);
        let (z, _) = f.perceptual(&a, &a);
        assert!(z.abs() < 1e-15);
        let b = rng::randn::<f64>(&mut r, &[1, 3, 16, 16], 0.5);
        let (ab, _) = f.perceptual(&a, &b);
        let (ba, _) = f.perceptual(&b, &a);
        assert!((ab - ba).abs() < 1e-12, "symmetry {ab} vs {ba}");
        assert!(ab > 0.0);
    }

    #[test]
    fn any_pixel_change_is_detected() {
        // the 1x1 first layer is injective, so even a single-pixel change
        // must register in the first feature map
        let mut f = FeatureExtractor::<f64>::new();
        let a = Tensor::<f64>::full(&[1, 3, 8, 8], 0.25);
        let mut b = a.clone();
        b.set4(0, 1, 3, 5, 0.2501);
        let (d, _) = f.perceptual(&a, &b);
        assert!(d > 0.0, "single-pixel perturbation missed");
    }

    #[test]
    fn scalar_matches_direct_summation_oracle() {
        let mut f = FeatureExtractor::<f64>::new();
        let mut r = stream(52, "percept-oracle");
        let a = rng::randn::<f64>(&mut r, &[1, 3, 8, 8], 0.7);
        let b = rng::randn::<f64>(&mut r, &[1, 3, 8, 8], 0.7);
        let (l, _) = f.perceptual(&a, &b);
        let fa = f.features(&a);
        let fb = f.features(&b);
        let mut want = 0.0f64;
        for (xa, xb) in fa.iter().zip(fb.iter()) {
            let s: f64 = xa.data().iter().zip(xb.data()).map(|(p, q)| (p - q).abs()).sum();
            want += s / xa.numel() as f64;
        }
        assert!((l - want).abs() < 1e-10, "{l} vs {want}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut f = FeatureExtractor::<f64>::new();
        let mut r = stream(53, "percept-grad");
        let a = rng::randn::<f64>(&mut r, &[1, 3, 8, 8], 0.7);
        let b = rng::randn::<f64>(&mut r, &[1, 3, 8, 8], 0.7);
        let (_, g) = f.perceptual(&a, &b);
        let err = check_grad(&a, &g, GRADCHECK_EPS, |t| {
            FeatureExtractor::<f64>::new().perceptual(t, &b).0
        });
        assert!(err < GRADCHECK_TOL, "perceptual grad err {err}");
    }

    #[test]
    fn frozen_weights_are_reproducible() {
        let mut f1 = FeatureExtractor::<f64>::new();
        let mut f2 = FeatureExtractor::<f64>::new();
        let x = Tensor::<f64>::full(&[1, 3, 8, 8], 0.3);
        assert_eq!(f1.features(&x)[4], f2.features(&x)[4]);
    }
}
