//! Geometric matching: two descriptor extractors, a normalized correlation
//! layer, and a regression head that outputs thin-plate-spline offsets.

use rand_chacha::ChaCha8Rng;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::nets::layers::{Conv2d, ConvStack, Init, InstanceNorm2d, Linear, StackLayer};
use crate::param::{Net, Param};
use crate::tensor::Tensor;
use crate::tps::{TPS_GRID_N, TPS_POINTS};

/// Channels of the person-side input: agnostic image (3) + pose map (3) +
/// garment-region mask (1).
pub const GMM_PERSON_CH: usize = 7;
/// Channels of the clothing-side input: the flat garment image.
pub const GMM_CLOTH_CH: usize = 3;

/// Descriptors with L2 norm at or below this floor are treated as zero
/// vectors, so featureless sites correlate to 0 instead of amplifying noise.
pub const DESC_NORM_EPS: f64 = 1e-12;

/// Normalize each site descriptor (the channel fiber at one spatial
/// position) to unit L2 norm. Returns the normalized map and the raw norms
/// as an [N, 1, H, W] tensor for the backward pass.
pub fn l2_normalize_sites<E: Element>(x: &Tensor<E>) -> (Tensor<E>, Tensor<E>) {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let hw = h * w;
    let eps = E::from_f64(DESC_NORM_EPS);
    let mut y = Tensor::zeros(x.shape());
    let mut norms = Tensor::zeros(&[n, 1, h, w]);
    for ni in 0..n {
        for p in 0..hw {
            let mut sq = E::ZERO;
            for ci in 0..c {
                let v = x.data()[(ni * c + ci) * hw + p];
                sq += v * v;
            }
            let raw = sq.sqrt();
            norms.data_mut()[ni * hw + p] = raw;
            let d = raw.maxv(eps);
            for ci in 0..c {
                let i = (ni * c + ci) * hw + p;
                y.data_mut()[i] = x.data()[i] / d;
            }
        }
    }
    (y, norms)
}

/// Adjoint of `l2_normalize_sites` given the normalized map, the raw norms,
/// and the upstream gradient.
pub fn l2_normalize_sites_backward<E: Element>(
    y: &Tensor<E>,
    norms: &Tensor<E>,
    gy: &Tensor<E>,
) -> Tensor<E> {
    let (n, c, h, w) = (y.dim(0), y.dim(1), y.dim(2), y.dim(3));
    let hw = h * w;
    let eps = E::from_f64(DESC_NORM_EPS);
    let mut gx = Tensor::zeros(y.shape());
    for ni in 0..n {
        for p in 0..hw {
            let raw = norms.data()[ni * hw + p];
            if raw > eps {
                // d(x/|x|) pulls out the component along the direction itself
                let mut dot = E::ZERO;
                for ci in 0..c {
                    let i = (ni * c + ci) * hw + p;
                    dot += y.data()[i] * gy.data()[i];
                }
                for ci in 0..c {
                    let i = (ni * c + ci) * hw + p;
                    gx.data_mut()[i] = (gy.data()[i] - y.data()[i] * dot) / raw;
                }
            } else {
                // inside the floor the map is linear: x / eps
                for ci in 0..c {
                    let i = (ni * c + ci) * hw + p;
                    gx.data_mut()[i] = gy.data()[i] / eps;
                }
            }
        }
    }
    gx
}

fn check_pair<E: Element>(fa: &Tensor<E>, fb: &Tensor<E>) -> Result<(usize, usize, usize, usize)> {
    if fa.shape() != fb.shape() || fa.shape().len() != 4 {
        return Err(Error::Shape(format!(
            "correlation needs matching [N,C,H,W] maps, got {:?} vs {:?}",
            fa.shape(),
            fb.shape()
        )));
    }
    Ok((fa.dim(0), fa.dim(1), fa.dim(2), fa.dim(3)))
}

/// Dense correlation volume between two descriptor maps. Both sides are
/// site-normalized first; output channel j = jy·W + jx holds, at each (y, x),
/// the inner product between side A's descriptor at site j and side B's
/// descriptor at (y, x). Shape: [N, H·W, H, W].
pub fn correlation<E: Element>(fa: &Tensor<E>, fb: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, c, h, w) = check_pair(fa, fb)?;
    let (ah, _) = l2_normalize_sites(fa);
    let (bh, _) = l2_normalize_sites(fb);
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, hw, h, w]);
    for ni in 0..n {
        for j in 0..hw {
            let o = &mut out.data_mut()[(ni * hw + j) * hw..(ni * hw + j + 1) * hw];
            for ci in 0..c {
                let av = ah.data()[(ni * c + ci) * hw + j];
                if av == E::ZERO {
                    continue;
                }
                let brow = &bh.data()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                for (ov, &bv) in o.iter_mut().zip(brow.iter()) {
                    *ov += av * bv;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of `correlation` with respect to both raw (pre-normalization)
/// descriptor maps.
pub fn correlation_backward<E: Element>(
    fa: &Tensor<E>,
    fb: &Tensor<E>,
    g: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (n, c, h, w) = check_pair(fa, fb)?;
    let hw = h * w;
    if g.shape() != [n, hw, h, w] {
        return Err(Error::Shape(format!("correlation grad shape {:?}", g.shape())));
    }
    let (ah, na) = l2_normalize_sites(fa);
    let (bh, nb) = l2_normalize_sites(fb);
    let mut gah = Tensor::zeros(fa.shape());
    let mut gbh = Tensor::zeros(fb.shape());
    for ni in 0..n {
        for j in 0..hw {
            let grow = &g.data()[(ni * hw + j) * hw..(ni * hw + j + 1) * hw];
            for ci in 0..c {
                let bi = (ni * c + ci) * hw;
                let brow = &bh.data()[bi..bi + hw];
                let mut acc = E::ZERO;
                for (&gv, &bv) in grow.iter().zip(brow.iter()) {
                    acc += gv * bv;
                }
                gah.data_mut()[bi + j] += acc;
                let av = ah.data()[bi + j];
                if av != E::ZERO {
                    let gb = &mut gbh.data_mut()[bi..bi + hw];
                    for (o, &gv) in gb.iter_mut().zip(grow.iter()) {
                        *o += gv * av;
                    }
                }
            }
        }
    }
    Ok((
        l2_normalize_sites_backward(&ah, &na, &gah),
        l2_normalize_sites_backward(&bh, &nb, &gbh),
    ))
}

struct GmmCache<E: Element> {
    fa: Tensor<E>,
    fb: Tensor<E>,
}

/// The full matcher: extract descriptors from both sides, correlate, and
/// regress spline control-point offsets [N, 2, 5, 5]. A zero-initialized
/// head makes the initial warp the identity.
pub struct GmmNet<E: Element> {
    pub person: ConvStack<E>,
    pub cloth: ConvStack<E>,
    pub reg: ConvStack<E>,
    pub fc: Linear<E>,
    hf: usize,
    wf: usize,
    cache: Option<GmmCache<E>>,
}

fn extractor<E: Element>(rng: &mut ChaCha8Rng, name: &str, c_in: usize) -> ConvStack<E> {
    ConvStack::new(vec![
        StackLayer::Conv(Conv2d::new(rng, &format!("{name}.0"), c_in, 32, 4, 2, 1, Init::He)),
        StackLayer::Norm(InstanceNorm2d::new(&format!("{name}.1"), 32)),
        StackLayer::Lrelu(0.2),
        StackLayer::Conv(Conv2d::new(rng, &format!("{name}.2"), 32, 64, 4, 2, 1, Init::He)),
        StackLayer::Norm(InstanceNorm2d::new(&format!("{name}.3"), 64)),
        StackLayer::Lrelu(0.2),
        StackLayer::Conv(Conv2d::new(rng, &format!("{name}.4"), 64, 64, 3, 1, 1, Init::He)),
    ])
}

impl<E: Element> GmmNet<E> {
    /// Build for inputs of size h x w; both must be multiples of 4 (two
    /// stride-2 stages before the correlation).
    pub fn new(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        assert!(h % 4 == 0 && w % 4 == 0, "matcher input must be divisible by 4");
        let (h8, w8) = (h / 4, w / 4);
        let sites = h8 * w8;
        let (hf, wf) = (h8 / 2, (w8 + 2 - 4) / 2 + 1);
        let reg = ConvStack::new(vec![
            StackLayer::Conv(Conv2d::new(rng, "gmm.reg.0", sites, 64, 3, 1, 1, Init::He)),
            StackLayer::Norm(InstanceNorm2d::new("gmm.reg.1", 64)),
            StackLayer::Lrelu(0.2),
            StackLayer::Conv(Conv2d::new(rng, "gmm.reg.2", 64, 64, 4, 2, 1, Init::He)),
            StackLayer::Norm(InstanceNorm2d::new("gmm.reg.3", 64)),
            StackLayer::Lrelu(0.2),
            StackLayer::Conv(Conv2d::new(rng, "gmm.reg.4", 64, 32, 3, 1, 1, Init::He)),
            StackLayer::Lrelu(0.2),
        ]);
        GmmNet {
            person: extractor(rng, "gmm.person", GMM_PERSON_CH),
            cloth: extractor(rng, "gmm.cloth", GMM_CLOTH_CH),
            reg,
            fc: Linear::new(rng, "gmm.fc", 32 * hf * wf, 2 * TPS_POINTS, Init::Zero),
            hf,
            wf,
            cache: None,
        }
    }

    /// person_in: [N, 7, h, w]; cloth_in: [N, 3, h, w] -> theta [N, 2, 5, 5].
    pub fn forward(&mut self, person_in: &Tensor<E>, cloth_in: &Tensor<E>) -> Result<Tensor<E>> {
        let fa = self.person.forward(person_in);
        let fb = self.cloth.forward(cloth_in);
        let corr = correlation(&fa, &fb)?;
        let r = self.reg.forward(&corr);
        let n = r.dim(0);
        let flat = r.reshape(&[n, 32 * self.hf * self.wf])?;
        let th = self.fc.forward(&flat);
        self.cache = Some(GmmCache { fa, fb });
        th.reshape(&[n, 2, TPS_GRID_N, TPS_GRID_N])
    }

    /// Accumulate parameter gradients for an upstream theta gradient and
    /// return the gradients with respect to both inputs.
    pub fn backward(&mut self, g_theta: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>)> {
        let cache = self.cache.as_ref().ok_or_else(|| {
            Error::InvalidArgument("matcher backward called before forward".into())
        })?;
        let n = g_theta.dim(0);
        let g_flat = self.fc.backward(&g_theta.clone().reshape(&[n, 2 * TPS_POINTS])?);
        let g_r = g_flat.reshape(&[n, 32, self.hf, self.wf])?;
        let g_corr = self.reg.backward(&g_r);
        let (g_fa, g_fb) = correlation_backward(&cache.fa, &cache.fb, &g_corr)?;
        let ga = self.person.backward(&g_fa);
        let gb = self.cloth.backward(&g_fb);
        Ok((ga, gb))
    }
}

impl<E: Element> Net<E> for GmmNet<E> {
    fn params(&mut self) -> Vec<&mut Param<E>> {
        let mut out = self.person.params();
        out.extend(self.cloth.params());
        out.extend(self.reg.params());
        out.extend(self.fc.params());
        out
    }
}
