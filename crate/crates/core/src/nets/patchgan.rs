//! Two-scale conditional patch discriminator. Each scale is a spectrally
//! normalized strided conv stack ending in a patch score grid; the half-res
//! scale sees the conditioning stack downsampled with nearest for the
//! leading label-like channels and 2x2 averaging for the image-like rest.

use rand_chacha::ChaCha8Rng;

use crate::element::Element;
use crate::nets::layers::{Conv2d, ConvStack, Init, InstanceNorm2d, StackLayer};
use crate::ops::resize::{
    downsample_area_2x, downsample_area_2x_backward, downsample_nearest_2x,
    downsample_nearest_2x_backward,
};
use crate::param::{Net, Param};
use crate::tensor::Tensor;

fn scale_stack<E: Element>(rng: &mut ChaCha8Rng, name: &str, in_ch: usize) -> ConvStack<E> {
    let g = 0.02;
    ConvStack::new(vec![
        StackLayer::Conv(
            Conv2d::new(rng, &format!("{name}.c0"), in_ch, 16, 4, 2, 1, Init::Normal(g))
                .with_spectral_norm(rng),
        ),
        StackLayer::Norm(InstanceNorm2d::new(&format!("{name}.n0"), 16)),
        StackLayer::Lrelu(0.2),
        StackLayer::Conv(
            Conv2d::new(rng, &format!("{name}.c1"), 16, 32, 4, 2, 1, Init::Normal(g))
                .with_spectral_norm(rng),
        ),
        StackLayer::Norm(InstanceNorm2d::new(&format!("{name}.n1"), 32)),
        StackLayer::Lrelu(0.2),
        StackLayer::Conv(
            Conv2d::new(rng, &format!("{name}.c2"), 32, 32, 3, 1, 1, Init::Normal(g))
                .with_spectral_norm(rng),
        ),
        StackLayer::Norm(InstanceNorm2d::new(&format!("{name}.n2"), 32)),
        StackLayer::Lrelu(0.2),
        StackLayer::Conv(
            Conv2d::new(rng, &format!("{name}.head"), 32, 1, 3, 1, 1, Init::Normal(g))
                .with_spectral_norm(rng),
        ),
    ])
}

/// Conditional two-scale discriminator over a channel-concatenated input
/// whose first `label_channels` channels are label-like (one-hot maps or
/// class probabilities) and the rest image-like.
pub struct PatchDiscriminator<E: Element> {
    pub full: ConvStack<E>,
    pub half: ConvStack<E>,
    pub label_channels: usize,
}

impl<E: Element> PatchDiscriminator<E> {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, in_ch: usize, label_channels: usize) -> Self {
        assert!(label_channels <= in_ch);
        PatchDiscriminator {
            full: scale_stack(rng, &format!("{name}.s0"), in_ch),
            half: scale_stack(rng, &format!("{name}.s1"), in_ch),
            label_channels,
        }
    }

    /// Advance every spectral-norm power iteration once; call at the top of
    /// each training iteration so all forwards within it share one estimate.
    pub fn sn_iterate(&mut self) {
        self.full.sn_iterate();
        self.half.sn_iterate();
    }

    fn split_downsample(&self, x: &Tensor<E>) -> Tensor<E> {
        let c = x.dim(1);
        if self.label_channels == 0 {
            return downsample_area_2x(x);
        }
        if self.label_channels == c {
            return downsample_nearest_2x(x);
        }
        let labels = x.slice_channels(0, self.label_channels).expect("checked at construction");
        let imgs = x
            .slice_channels(self.label_channels, c - self.label_channels)
            .expect("checked at construction");
        let dl = downsample_nearest_2x(&labels);
        let di = downsample_area_2x(&imgs);
        Tensor::concat_channels(&[&dl, &di]).expect("matching spatial sizes")
    }

    fn split_downsample_backward(&self, g_half: &Tensor<E>, c: usize) -> Tensor<E> {
        if self.label_channels == 0 {
            return downsample_area_2x_backward(g_half);
        }
        if self.label_channels == c {
            return downsample_nearest_2x_backward(g_half);
        }
        let gl = g_half.slice_channels(0, self.label_channels).expect("checked at construction");
        let gi = g_half
            .slice_channels(self.label_channels, c - self.label_channels)
            .expect("checked at construction");
        let ul = downsample_nearest_2x_backward(&gl);
        let ui = downsample_area_2x_backward(&gi);
        Tensor::concat_channels(&[&ul, &ui]).expect("matching spatial sizes")
    }

    /// Patch score grids, full scale first.
    pub fn forward(&mut self, x: &Tensor<E>) -> Vec<Tensor<E>> {
        let s0 = self.full.forward(x);
        let xh = self.split_downsample(x);
        let s1 = self.half.forward(&xh);
        vec![s0, s1]
    }

    /// Per-scale activation lists from the last forward (for feature
    /// matching), ordered to match `forward`'s score list.
    pub fn features(&self) -> Vec<Vec<Tensor<E>>> {
        vec![self.full.features().to_vec(), self.half.features().to_vec()]
    }

    /// Discriminator update path: accumulate parameter gradients from the
    /// per-scale score gradients of the last forward.
    pub fn backward(&mut self, score_grads: &[Tensor<E>]) {
        assert_eq!(score_grads.len(), 2);
        self.full.backward(&score_grads[0]);
        self.half.backward(&score_grads[1]);
    }

    /// Generator update path: input gradient only, with optional per-scale
    /// feature gradients injected at the recorded activations.
    pub fn backward_input(
        &self,
        score_grads: &[Tensor<E>],
        feature_grads: Option<&[Vec<Tensor<E>>]>,
        in_ch: usize,
    ) -> Tensor<E> {
        assert_eq!(score_grads.len(), 2);
        let fg = |i: usize| feature_grads.map(|f| &f[i][..]);
        let mut gx = self.full.backward_input(&score_grads[0], fg(0));
        let g_half = self.half.backward_input(&score_grads[1], fg(1));
        gx.add_scaled_assign(&self.split_downsample_backward(&g_half, in_ch), E::ONE);
        gx
    }
}

impl<E: Element> Net<E> for PatchDiscriminator<E> {
    fn params(&mut self) -> Vec<&mut Param<E>> {
        let mut p = self.full.params();
        p.extend(self.half.params());
        p
    }

    fn buffers(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut b = self.full.buffers();
        b.extend(self.half.buffers());
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::gradcheck::{check_grad, GRADCHECK_EPS, GRADCHECK_TOL};
    use crate::rng::{self, stream};

    #[test]
    fn score_grids_shrink_with_scale() {
        let mut r = stream(31, "pd-shape");
        let mut d = PatchDiscriminator::<f64>::new(&mut r, "d", 6, 2);
        let x = rng::randn::<f64>(&mut r, &[1, 6, 16, 16], 1.0);
        let scores = d.forward(&x);
        assert_eq!(scores[0].shape(), &[1, 1, 4, 4]);
        assert_eq!(scores[1].shape(), &[1, 1, 2, 2]);
        assert_eq!(d.features()[0].len(), 3);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut r = stream(32, "pd-grad");
        let mut d = PatchDiscriminator::<f64>::new(&mut r, "d", 3, 1);
        let x = rng::randn::<f64>(&mut r, &[1, 3, 8, 8], 1.0);
        let scores = d.forward(&x);
        // weighted sum over both scales exercises the mixed downsample adjoint
        let w0 = Tensor::from_fn(scores[0].shape(), |i| 0.3 + 0.05 * i as f64);
        let w1 = Tensor::from_fn(scores[1].shape(), |i| -0.2 + 0.07 * i as f64);
        let gx = d.backward_input(&[w0.clone(), w1.clone()], None, 3);
        let snapshot: Vec<Tensor<f64>> = d.params().iter_mut().map(|p| p.value.clone()).collect();
        let err = check_grad(&x, &gx, GRADCHECK_EPS, |t| {
            let mut d2 = PatchDiscriminator::<f64>::new(&mut stream(32, "pd-grad"), "d", 3, 1);
            for (p, v) in d2.params().iter_mut().zip(snapshot.iter()) {
                p.value = v.clone();
            }
            let s = d2.forward(t);
            s[0].mul(&w0).unwrap().sum() + s[1].mul(&w1).unwrap().sum()
        });
        assert!(err < GRADCHECK_TOL, "patch D input grad err {err}");
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut r = stream(33, "pd-pgrad");
        let mut d = PatchDiscriminator::<f64>::new(&mut r, "d", 2, 0);
        let x = rng::randn::<f64>(&mut r, &[1, 2, 8, 8], 1.0);
        let scores = d.forward(&x);
        let w0 = Tensor::from_fn(scores[0].shape(), |i| 0.4 - 0.03 * i as f64);
        let w1 = Tensor::from_fn(scores[1].shape(), |i| 0.1 + 0.02 * i as f64);
        for p in d.params() {
            p.zero_grad();
        }
        d.backward(&[w0.clone(), w1.clone()]);
        // probe the first conv's weight via rebuild
        let snapshot: Vec<Tensor<f64>> = d.params().iter_mut().map(|p| p.value.clone()).collect();
        let w_val = snapshot[0].clone();
        let w_grad = {
            let ps = d.params();
            ps[0].grad.clone()
        };
        let err = check_grad(&w_val, &w_grad, GRADCHECK_EPS, |wt| {
            let mut d2 = PatchDiscriminator::<f64>::new(&mut stream(33, "pd-pgrad"), "d", 2, 0);
            {
                let mut ps = d2.params();
                for (p, v) in ps.iter_mut().zip(snapshot.iter()) {
                    p.value = v.clone();
                }
                ps[0].value = wt.clone();
            }
            let s = d2.forward(&x);
            s[0].mul(&w0).unwrap().sum() + s[1].mul(&w1).unwrap().sum()
        });
        assert!(err < GRADCHECK_TOL, "patch D weight grad err {err}");
    }
}
