//! Layer building blocks with explicit forward/backward passes. Every layer
//! caches what its backward needs during forward; the caller is responsible
//! for pairing one backward with the preceding forward.

use rand_chacha::ChaCha8Rng;

use crate::element::Element;
use crate::ops::activ;
use crate::ops::conv;
use crate::ops::norm::{instance_norm, instance_norm_backward, InstanceNormCache};
use crate::ops::spectral;
use crate::param::Param;
use crate::rng;
use crate::tensor::Tensor;

/// Weight initialization schemes.
#[derive(Clone, Copy)]
pub enum Init {
    /// Gaussian with the given standard deviation (GAN convention 0.02).
    Normal(f64),
    /// He/Kaiming scaling for leaky-ReLU stacks: std = sqrt(2 / fan_in).
    He,
    /// All-zero weights and bias; used for heads that must start inert.
    Zero,
}

/// Persistent power-iteration vectors for spectral normalization. Stored as
/// tensors so checkpoints can carry them verbatim.
pub struct SnState<E: Element> {
    pub u: Tensor<E>,
    pub v: Tensor<E>,
}

struct ConvCache<E: Element> {
    x: Tensor<E>,
    /// Normalized weight, present only under spectral norm.
    sn: Option<Tensor<E>>,
}

/// 2-D convolution with optional spectral weight normalization.
pub struct Conv2d<E: Element> {
    pub w: Param<E>,
    pub b: Param<E>,
    pub stride: usize,
    pub pad: usize,
    pub sn: Option<SnState<E>>,
    cache: Option<ConvCache<E>>,
}

impl<E: Element> Conv2d<E> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
    ) -> Self {
        let shape = [c_out, c_in, k, k];
        let w = match init {
            Init::Normal(std) => rng::randn(rng, &shape, std),
            Init::He => rng::randn(rng, &shape, (2.0 / (c_in * k * k) as f64).sqrt()),
            Init::Zero => Tensor::zeros(&shape),
        };
        Conv2d {
            w: Param::new(&format!("{name}.w"), w),
            b: Param::new(&format!("{name}.b"), Tensor::zeros(&[c_out])),
            stride,
            pad,
            sn: None,
            cache: None,
        }
    }

    /// Attach spectral normalization; `u` starts as a normalized random
    /// vector and both iterates live in the checkpoint.
    pub fn with_spectral_norm(mut self, rng: &mut ChaCha8Rng) -> Self {
        let rows = self.w.value.dim(0);
        let cols = self.w.value.numel() / rows;
        let mut u: Tensor<E> = rng::randn(rng, &[rows], 1.0);
        let norm = u.data().iter().fold(E::ZERO, |a, &x| a + x * x).sqrt();
        u.map_inplace(|x| x / norm.maxv(E::from_f64(1e-12)));
        self.sn = Some(SnState { u, v: Tensor::zeros(&[cols]) });
        self
    }

    /// One power-iteration update of (u, v); call exactly once per training
    /// iteration so the normalization stays a fixed function within it.
    pub fn sn_iterate(&mut self) {
        if let Some(sn) = &mut self.sn {
            spectral::power_iterate(&self.w.value, sn.u.data_mut(), sn.v.data_mut());
        }
    }

    pub fn forward(&mut self, x: &Tensor<E>) -> Tensor<E> {
        let (y, sn_cache) = match &self.sn {
            Some(sn) => {
                let (w_eff, _) = spectral::normalized(&self.w.value, sn.u.data(), sn.v.data());
                let y = conv::conv2d(x, &w_eff, &self.b.value, self.stride, self.pad)
                    .expect("conv shapes fixed at construction");
                (y, Some(w_eff))
            }
            None => (
                conv::conv2d(x, &self.w.value, &self.b.value, self.stride, self.pad)
                    .expect("conv shapes fixed at construction"),
                None,
            ),
        };
        self.cache = Some(ConvCache { x: x.clone(), sn: sn_cache });
        y
    }

    /// Backward accumulating weight/bias gradients; returns the input grad.
    pub fn backward(&mut self, gy: &Tensor<E>) -> Tensor<E> {
        let cache = self.cache.as_ref().expect("conv backward before forward");
        match &cache.sn {
            Some(w_eff) => {
                let (gx, gw_eff, gb) = conv::conv2d_backward(&cache.x, w_eff, gy, self.stride, self.pad)
                    .expect("conv shapes fixed at construction");
                let sn = self.sn.as_ref().unwrap();
                let gw = spectral::normalized_backward(&self.w.value, sn.u.data(), sn.v.data(), &gw_eff);
                self.w.add_grad(&gw);
                self.b.add_grad(&gb);
                gx
            }
            None => {
                let (gx, gw, gb) =
                    conv::conv2d_backward(&cache.x, &self.w.value, gy, self.stride, self.pad)
                        .expect("conv shapes fixed at construction");
                self.w.add_grad(&gw);
                self.b.add_grad(&gb);
                gx
            }
        }
    }

    /// Input gradient only — used when a downstream consumer needs gradients
    /// but this layer's parameters must stay untouched (generator step
    /// through a frozen discriminator).
    pub fn backward_input(&self, gy: &Tensor<E>) -> Tensor<E> {
        let cache = self.cache.as_ref().expect("conv backward before forward");
        let (h, w) = (cache.x.dim(2), cache.x.dim(3));
        let weight = match &cache.sn {
            Some(w_eff) => w_eff,
            None => &self.w.value,
        };
        conv::conv2d_backward_input(weight, gy, h, w, self.stride, self.pad)
            .expect("conv shapes fixed at construction")
    }

    pub fn params(&mut self) -> Vec<&mut Param<E>> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn buffers(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        match &mut self.sn {
            Some(sn) => vec![
                (format!("{}.sn_u", self.w.name.trim_end_matches(".w")), &mut sn.u),
                (format!("{}.sn_v", self.w.name.trim_end_matches(".w")), &mut sn.v),
            ],
            None => Vec::new(),
        }
    }
}

/// Instance normalization with learned per-channel affine.
pub struct InstanceNorm2d<E: Element> {
    pub g: Param<E>,
    pub b: Param<E>,
    cache: Option<(Tensor<E>, InstanceNormCache<E>)>,
}

impl<E: Element> InstanceNorm2d<E> {
    pub fn new(name: &str, channels: usize) -> Self {
        InstanceNorm2d {
            g: Param::new(&format!("{name}.g"), Tensor::full(&[channels], E::ONE)),
            b: Param::new(&format!("{name}.b"), Tensor::zeros(&[channels])),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<E>) -> Tensor<E> {
        let (y, stats) = instance_norm(x, &self.g.value, &self.b.value);
        self.cache = Some((x.clone(), stats));
        y
    }

    pub fn backward(&mut self, gy: &Tensor<E>) -> Tensor<E> {
        let (x, stats) = self.cache.as_ref().expect("norm backward before forward");
        let (gx, gg, gb) = instance_norm_backward(x, &self.g.value, stats, gy);
        self.g.add_grad(&gg);
        self.b.add_grad(&gb);
        gx
    }

    pub fn backward_input(&self, gy: &Tensor<E>) -> Tensor<E> {
        let (x, stats) = self.cache.as_ref().expect("norm backward before forward");
        let (gx, _, _) = instance_norm_backward(x, &self.g.value, stats, gy);
        gx
    }

    pub fn params(&mut self) -> Vec<&mut Param<E>> {
        vec![&mut self.g, &mut self.b]
    }
}

/// Fully connected layer over [N, in] tensors.
pub struct Linear<E: Element> {
    pub w: Param<E>, // [out, in]
    pub b: Param<E>, // [out]
    cache: Option<Tensor<E>>,
}

impl<E: Element> Linear<E> {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, n_in: usize, n_out: usize, init: Init) -> Self {
        let w = match init {
            Init::Normal(std) => rng::randn(rng, &[n_out, n_in], std),
            Init::He => rng::randn(rng, &[n_out, n_in], (2.0 / n_in as f64).sqrt()),
            Init::Zero => Tensor::zeros(&[n_out, n_in]),
        };
        Linear {
            w: Param::new(&format!("{name}.w"), w),
            b: Param::new(&format!("{name}.b"), Tensor::zeros(&[n_out])),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<E>) -> Tensor<E> {
        let (n, d_in) = (x.dim(0), x.dim(1));
        let d_out = self.w.value.dim(0);
        debug_assert_eq!(d_in, self.w.value.dim(1));
        let mut y = Tensor::zeros(&[n, d_out]);
        for ni in 0..n {
            let xi = &x.data()[ni * d_in..(ni + 1) * d_in];
            for o in 0..d_out {
                let row = &self.w.value.data()[o * d_in..(o + 1) * d_in];
                let mut acc = self.b.value.data()[o];
                for (wv, xv) in row.iter().zip(xi.iter()) {
                    acc += *wv * *xv;
                }
                y.data_mut()[ni * d_out + o] = acc;
            }
        }
        self.cache = Some(x.clone());
        y
    }

    pub fn backward(&mut self, gy: &Tensor<E>) -> Tensor<E> {
        let x = self.cache.as_ref().expect("linear backward before forward");
        let (n, d_in) = (x.dim(0), x.dim(1));
        let d_out = self.w.value.dim(0);
        let mut gx = Tensor::zeros(&[n, d_in]);
        let mut gw = Tensor::zeros(&[d_out, d_in]);
        let mut gb = Tensor::zeros(&[d_out]);
        for ni in 0..n {
            let xi = &x.data()[ni * d_in..(ni + 1) * d_in];
            for o in 0..d_out {
                let g = gy.data()[ni * d_out + o];
                gb.data_mut()[o] += g;
                let wrow = &self.w.value.data()[o * d_in..(o + 1) * d_in];
                let gxrow = &mut gx.data_mut()[ni * d_in..(ni + 1) * d_in];
                for j in 0..d_in {
                    gxrow[j] += g * wrow[j];
                }
                let gwrow = &mut gw.data_mut()[o * d_in..(o + 1) * d_in];
                for j in 0..d_in {
                    gwrow[j] += g * xi[j];
                }
            }
        }
        self.w.add_grad(&gw);
        self.b.add_grad(&gb);
        gx
    }

    pub fn params(&mut self) -> Vec<&mut Param<E>> {
        vec![&mut self.w, &mut self.b]
    }
}

/// One stage of a sequential conv stack.
pub enum StackLayer<E: Element> {
    Conv(Conv2d<E>),
    Norm(InstanceNorm2d<E>),
    Lrelu(f64),
    Relu,
}

/// Sequential stack of convs / norms / activations. Caches per-layer inputs
/// so the whole chain can be walked backwards, and records activation
/// outputs for feature-matching losses.
pub struct ConvStack<E: Element> {
    pub layers: Vec<StackLayer<E>>,
    inputs: Vec<Tensor<E>>,
    features: Vec<Tensor<E>>,
}

impl<E: Element> ConvStack<E> {
    pub fn new(layers: Vec<StackLayer<E>>) -> Self {
        ConvStack { layers, inputs: Vec::new(), features: Vec::new() }
    }

    pub fn sn_iterate(&mut self) {
        for l in &mut self.layers {
            if let StackLayer::Conv(c) = l {
                c.sn_iterate();
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor<E>) -> Tensor<E> {
        self.inputs.clear();
        self.features.clear();
        let mut h = x.clone();
        for l in &mut self.layers {
            self.inputs.push(h.clone());
            h = match l {
                StackLayer::Conv(c) => c.forward(&h),
                StackLayer::Norm(n) => n.forward(&h),
                StackLayer::Lrelu(slope) => {
                    let y = activ::leaky_relu(&h, *slope);
                    self.features.push(y.clone());
                    y
                }
                StackLayer::Relu => {
                    let y = activ::relu(&h);
                    self.features.push(y.clone());
                    y
                }
            };
        }
        h
    }

    /// Activation outputs (one per Lrelu/Relu stage) of the last forward.
    pub fn features(&self) -> &[Tensor<E>] {
        &self.features
    }

    pub fn backward(&mut self, gy: &Tensor<E>) -> Tensor<E> {
        let mut g = gy.clone();
        for (l, x) in self.layers.iter_mut().zip(self.inputs.iter()).rev() {
            g = match l {
                StackLayer::Conv(c) => c.backward(&g),
                StackLayer::Norm(n) => n.backward(&g),
                StackLayer::Lrelu(slope) => activ::leaky_relu_backward(x, &g, *slope),
                StackLayer::Relu => activ::relu_backward(x, &g),
            };
        }
        g
    }

    /// Input gradient without touching parameters. `feature_grads`, when
    /// given, injects an extra gradient at each activation output (ordered as
    /// `features()`), which is how feature-matching terms reach the input.
    pub fn backward_input(&self, gy: &Tensor<E>, feature_grads: Option<&[Tensor<E>]>) -> Tensor<E> {
        if let Some(fg) = feature_grads {
            assert_eq!(fg.len(), self.features.len(), "one grad per recorded activation");
        }
        let mut g = gy.clone();
        let mut act_idx = self.features.len();
        for (l, x) in self.layers.iter().zip(self.inputs.iter()).rev() {
            g = match l {
                StackLayer::Conv(c) => c.backward_input(&g),
                StackLayer::Norm(n) => n.backward_input(&g),
                StackLayer::Lrelu(slope) => {
                    act_idx -= 1;
                    if let Some(fg) = feature_grads {
                        g.add_scaled_assign(&fg[act_idx], E::ONE);
                    }
                    activ::leaky_relu_backward(x, &g, *slope)
                }
                StackLayer::Relu => {
                    act_idx -= 1;
                    if let Some(fg) = feature_grads {
                        g.add_scaled_assign(&fg[act_idx], E::ONE);
                    }
                    activ::relu_backward(x, &g)
                }
            };
        }
        g
    }

    pub fn params(&mut self) -> Vec<&mut Param<E>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                StackLayer::Conv(c) => out.extend(c.params()),
                StackLayer::Norm(n) => out.extend(n.params()),
                _ => {}
            }
        }
        out
    }

    pub fn buffers(&mut self) -> Vec<(String, &mut Tensor<E>)> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            if let StackLayer::Conv(c) = l {
                out.extend(c.buffers());
            }
        }
        out
    }
}
