//! Instance normalization: standardize each (image, channel) plane over its
//! spatial extent, then apply a learned per-channel affine.

use crate::element::Element;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Cached statistics from the forward pass, needed for the backward pass.
pub struct InstanceNormCache<E: Element> {
    pub mean: Vec<E>,    // per (n, c)
    pub inv_std: Vec<E>, // per (n, c)
}

/// y = gamma * (x - mean) / sqrt(var + eps) + beta, stats over H*W.
pub fn instance_norm<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
) -> (Tensor<E>, InstanceNormCache<E>) {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let hw = E::from_usize(h * w);
    let eps = E::from_f64(NORM_EPS);
    let mut y = Tensor::zeros(x.shape());
    let mut cache = InstanceNormCache { mean: Vec::with_capacity(n * c), inv_std: Vec::with_capacity(n * c) };
    for ni in 0..n {
        for ci in 0..c {
            let xp = x.plane(ni, ci);
            let mut s = E::ZERO;
            for &v in xp {
                s += v;
            }
            let mean = s / hw;
            let mut var = E::ZERO;
            for &v in xp {
                let d = v - mean;
                var += d * d;
            }
            var = var / hw;
            let inv_std = E::ONE / (var + eps).sqrt();
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            let yp = y.plane_mut(ni, ci);
            for (o, &v) in yp.iter_mut().zip(xp.iter()) {
                *o = g * (v - mean) * inv_std + b;
            }
            cache.mean.push(mean);
            cache.inv_std.push(inv_std);
        }
    }
    (y, cache)
}

/// Gradients for input, gamma and beta. Uses the population-statistics
/// backward: gx = inv_std * (gh - mean(gh) - xhat * mean(gh * xhat)) with
/// gh = gy * gamma.
pub fn instance_norm_backward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    cache: &InstanceNormCache<E>,
    gy: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let hw = E::from_usize(h * w);
    let mut gx = Tensor::zeros(x.shape());
    let mut ggamma = Tensor::zeros(&[c]);
    let mut gbeta = Tensor::zeros(&[c]);
    for ni in 0..n {
        for ci in 0..c {
            let xp = x.plane(ni, ci);
            let gp = gy.plane(ni, ci);
            let mean = cache.mean[ni * c + ci];
            let inv_std = cache.inv_std[ni * c + ci];
            let g = gamma.data()[ci];
            let mut sum_gy = E::ZERO;
            let mut sum_gy_xhat = E::ZERO;
            for (&gv, &xv) in gp.iter().zip(xp.iter()) {
                let xhat = (xv - mean) * inv_std;
                sum_gy += gv;
                sum_gy_xhat += gv * xhat;
            }
            ggamma.data_mut()[ci] += sum_gy_xhat;
            gbeta.data_mut()[ci] += sum_gy;
            let m_gh = g * sum_gy / hw;
            let m_gh_xhat = g * sum_gy_xhat / hw;
            let gxp = gx.plane_mut(ni, ci);
            for ((o, &gv), &xv) in gxp.iter_mut().zip(gp.iter()).zip(xp.iter()) {
                let xhat = (xv - mean) * inv_std;
                *o = inv_std * (g * gv - m_gh - xhat * m_gh_xhat);
            }
        }
    }
    (gx, ggamma, gbeta)
}
