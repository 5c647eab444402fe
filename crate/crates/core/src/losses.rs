//! Adversarial, feature-matching and masked reconstruction losses. Each
//! returns the scalar together with the gradients the training loops chain
//! into the networks. Multi-scale inputs are averaged over scales.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::masks::Mask;
use crate::tensor::Tensor;

/// Least-squares GAN discriminator loss: ½·mse(real, 1) + ½·mse(fake, 0),
/// each mse averaged over its patch grid, the total averaged over scales.
pub fn lsgan_d_loss<E: Element>(
    real: &[Tensor<E>],
    fake: &[Tensor<E>],
) -> (E, Vec<Tensor<E>>, Vec<Tensor<E>>) {
    assert_eq!(real.len(), fake.len(), "one real and one fake grid per scale");
    let scales = E::from_usize(real.len());
    let half = E::from_f64(0.5);
    let mut loss = E::ZERO;
    let mut g_real = Vec::with_capacity(real.len());
    let mut g_fake = Vec::with_capacity(fake.len());
    for (r, f) in real.iter().zip(fake.iter()) {
        let nr = E::from_usize(r.numel());
        let nf = E::from_usize(f.numel());
        let mut acc = E::ZERO;
        let mut gr = Tensor::zeros(r.shape());
        for (g, &s) in gr.data_mut().iter_mut().zip(r.data()) {
            let d = s - E::ONE;
            acc += half * d * d / nr;
            *g = d / (nr * scales); // d(½(s-1)²)/ds = (s-1), scale-averaged
        }
        let mut gf = Tensor::zeros(f.shape());
        for (g, &s) in gf.data_mut().iter_mut().zip(f.data()) {
            acc += half * s * s / nf;
            *g = s / (nf * scales);
        }
        loss += acc / scales;
        g_real.push(gr);
        g_fake.push(gf);
    }
    (loss, g_real, g_fake)
}

/// Least-squares generator loss: mse(fake, 1) averaged over scales.
pub fn lsgan_g_loss<E: Element>(fake: &[Tensor<E>]) -> (E, Vec<Tensor<E>>) {
    let scales = E::from_usize(fake.len());
    let two = E::from_f64(2.0);
    let mut loss = E::ZERO;
    let mut grads = Vec::with_capacity(fake.len());
    for f in fake {
        let nf = E::from_usize(f.numel());
        let mut g = Tensor::zeros(f.shape());
        let mut acc = E::ZERO;
        for (o, &s) in g.data_mut().iter_mut().zip(f.data()) {
            let d = s - E::ONE;
            acc += d * d / nf;
            *o = two * d / (nf * scales);
        }
        loss += acc / scales;
        grads.push(g);
    }
    (loss, grads)
}

/// Hinge discriminator loss: mean relu(1 − real) + mean relu(1 + fake),
/// averaged over scales.
pub fn hinge_d_loss<E: Element>(
    real: &[Tensor<E>],
    fake: &[Tensor<E>],
) -> (E, Vec<Tensor<E>>, Vec<Tensor<E>>) {
    assert_eq!(real.len(), fake.len(), "one real and one fake grid per scale");
    let scales = E::from_usize(real.len());
    let mut loss = E::ZERO;
    let mut g_real = Vec::with_capacity(real.len());
    let mut g_fake = Vec::with_capacity(fake.len());
    for (r, f) in real.iter().zip(fake.iter()) {
        let nr = E::from_usize(r.numel());
        let nf = E::from_usize(f.numel());
        let mut acc = E::ZERO;
        let mut gr = Tensor::zeros(r.shape());
        for (g, &s) in gr.data_mut().iter_mut().zip(r.data()) {
            let m = E::ONE - s;
            if m > E::ZERO {
                acc += m / nr;
                *g = -(E::ONE) / (nr * scales);
            }
        }
        let mut gf = Tensor::zeros(f.shape());
        for (g, &s) in gf.data_mut().iter_mut().zip(f.data()) {
            let m = E::ONE + s;
            if m > E::ZERO {
                acc += m / nf;
                *g = E::ONE / (nf * scales);
            }
        }
        loss += acc / scales;
        g_real.push(gr);
        g_fake.push(gf);
    }
    (loss, g_real, g_fake)
}

/// Hinge generator loss: −mean(fake), averaged over scales.
pub fn hinge_g_loss<E: Element>(fake: &[Tensor<E>]) -> (E, Vec<Tensor<E>>) {
    let scales = E::from_usize(fake.len());
    let mut loss = E::ZERO;
    let mut grads = Vec::with_capacity(fake.len());
    for f in fake {
        let nf = E::from_usize(f.numel());
        let mut acc = E::ZERO;
        for &s in f.data() {
            acc -= s / nf;
        }
        loss += acc / scales;
        grads.push(Tensor::full(f.shape(), -(E::ONE) / (nf * scales)));
    }
    (loss, grads)
}

/// Feature matching: Σ_layers (1/K_i)·‖A_i(real) − A_i(fake)‖₁ per scale,
/// averaged over scales. Returns gradients with respect to the fake
/// activations (the real branch is treated as a constant target).
pub fn feature_matching<E: Element>(
    real: &[Vec<Tensor<E>>],
    fake: &[Vec<Tensor<E>>],
) -> Result<(E, Vec<Vec<Tensor<E>>>)> {
    if real.len() != fake.len() {
        return Err(Error::InvalidArgument(format!(
            "feature matching scale count {} vs {}",
            real.len(),
            fake.len()
        )));
    }
    let scales = E::from_usize(real.len());
    let mut loss = E::ZERO;
    let mut grads = Vec::with_capacity(fake.len());
    for (rs, fs) in real.iter().zip(fake.iter()) {
        if rs.len() != fs.len() {
            return Err(Error::InvalidArgument(format!(
                "feature matching layer count {} vs {}",
                rs.len(),
                fs.len()
            )));
        }
        let mut scale_grads = Vec::with_capacity(fs.len());
        for (r, f) in rs.iter().zip(fs.iter()) {
            if r.shape() != f.shape() {
                return Err(Error::Shape(format!(
                    "feature matching layer shapes {:?} vs {:?}",
                    r.shape(),
                    f.shape()
                )));
            }
            let k = E::from_usize(r.numel());
            let mut g = Tensor::zeros(f.shape());
            let mut acc = E::ZERO;
            for ((o, &a), &b) in g.data_mut().iter_mut().zip(f.data()).zip(r.data()) {
                let d = a - b;
                acc += d.abs() / k;
                *o = if d > E::ZERO {
                    E::ONE / (k * scales)
                } else if d < E::ZERO {
                    -(E::ONE) / (k * scales)
                } else {
                    E::ZERO
                };
            }
            loss += acc / scales;
            scale_grads.push(g);
        }
        grads.push(scale_grads);
    }
    Ok((loss, grads))
}

/// Mean absolute difference over the masked pixels (per channel), with the
/// gradient taken with respect to `a`. An empty mask contributes zero and is
/// reported via the returned flag so callers can surface a warning.
pub fn masked_l1<E: Element>(a: &Tensor<E>, b: &Tensor<E>, mask: &Mask) -> (E, Tensor<E>, bool) {
    assert_eq!(a.shape(), b.shape(), "masked_l1 operand shapes");
    let (n, c, h, w) = (a.dim(0), a.dim(1), a.dim(2), a.dim(3));
    assert_eq!((mask.h(), mask.w()), (h, w), "mask resolution");
    let count = mask.count();
    let mut grad = Tensor::zeros(a.shape());
    if count == 0 {
        return (E::ZERO, grad, true);
    }
    let denom = E::from_usize(count * n * c);
    let mut loss = E::ZERO;
    for ni in 0..n {
        for ci in 0..c {
            let ap = a.plane(ni, ci);
            let bp = b.plane(ni, ci);
            let base = (ni * c + ci) * h * w;
            for i in 0..h * w {
                if mask.data()[i] == 1 {
                    let d = ap[i] - bp[i];
                    loss += d.abs() / denom;
                    grad.data_mut()[base + i] = if d > E::ZERO {
                        E::ONE / denom
                    } else if d < E::ZERO {
                        -(E::ONE) / denom
                    } else {
                        E::ZERO
                    };
                }
            }
        }
    }
    (loss, grad, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::gradcheck::{check_grad, GRADCHECK_EPS, GRADCHECK_TOL};
    use crate::rng::{self, stream};

    #[test]
    fn lsgan_analytic_examples() {
        // perfect discriminator: real -> 1, fake -> 0 gives zero loss
        let real = vec![Tensor::<f64>::full(&[1, 1, 2, 2], 1.0)];
        let fake = vec![Tensor::<f64>::zeros(&[1, 1, 2, 2])];
        let (d, _, _) = lsgan_d_loss(&real, &fake);
        assert!(d.abs() < 1e-12);
        // scores 0.5 everywhere: both terms contribute ½·0.25, g term (0.5-1)²
        let half_r = vec![Tensor::<f64>::full(&[1, 1, 3, 3], 0.5), Tensor::full(&[1, 1, 2, 2], 0.5)];
        let half_f = half_r.clone();
        let (d, _, _) = lsgan_d_loss(&half_r, &half_f);
        assert!((d - 0.25).abs() < 1e-12, "d_loss {d}");
        let (g, _) = lsgan_g_loss(&half_f);
        assert!((g - 0.25).abs() < 1e-12, "g_loss {g}");
    }

    #[test]
    fn lsgan_matches_direct_mean_square_oracle() {
        let mut r = stream(21, "lsgan-oracle");
        let real = vec![rng::uniform::<f64>(&mut r, &[1, 1, 4, 3], -1.0, 2.0)];
        let fake = vec![rng::uniform::<f64>(&mut r, &[1, 1, 4, 3], -1.0, 2.0)];
        let (d, _, _) = lsgan_d_loss(&real, &fake);
        let mr: f64 = real[0].data().iter().map(|s| (s - 1.0) * (s - 1.0)).sum::<f64>() / 12.0;
        let mf: f64 = fake[0].data().iter().map(|s| s * s).sum::<f64>() / 12.0;
        assert!((d - 0.5 * (mr + mf)).abs() < 1e-12);
        let (g, _) = lsgan_g_loss(&fake);
        let mg: f64 = fake[0].data().iter().map(|s| (s - 1.0) * (s - 1.0)).sum::<f64>() / 12.0;
        assert!((g - mg).abs() < 1e-12);
    }

    #[test]
    fn lsgan_gradients_match_finite_differences() {
        let mut r = stream(22, "lsgan-grad");
        let real = rng::uniform::<f64>(&mut r, &[1, 1, 3, 3], -1.0, 2.0);
        let fake = rng::uniform::<f64>(&mut r, &[1, 1, 2, 2], -1.0, 2.0);
        let (_, gr, gf) = lsgan_d_loss(&[real.clone()], &[fake.clone()]);
        let err_r = check_grad(&real, &gr[0], GRADCHECK_EPS, |t| {
            lsgan_d_loss(&[t.clone()], &[fake.clone()]).0
        });
        let err_f = check_grad(&fake, &gf[0], GRADCHECK_EPS, |t| {
            lsgan_d_loss(&[real.clone()], &[t.clone()]).0
        });
        assert!(err_r < GRADCHECK_TOL && err_f < GRADCHECK_TOL, "{err_r} {err_f}");
        let (_, gg) = lsgan_g_loss(&[fake.clone()]);
        let err_g = check_grad(&fake, &gg[0], GRADCHECK_EPS, |t| lsgan_g_loss(&[t.clone()]).0);
        assert!(err_g < GRADCHECK_TOL, "{err_g}");
    }

    #[test]
    fn hinge_analytic_examples() {
        // well-separated scores: no margin violation, zero d loss
        let real = vec![Tensor::<f64>::full(&[1, 1, 2, 2], 1.5)];
        let fake = vec![Tensor::<f64>::full(&[1, 1, 2, 2], -1.5)];
        let (d, _, _) = hinge_d_loss(&real, &fake);
        assert!(d.abs() < 1e-12);
        // all scores zero: relu(1) + relu(1) = 2; g loss is -mean(0) = 0
        let zr = vec![Tensor::<f64>::zeros(&[1, 1, 3, 2]), Tensor::zeros(&[1, 1, 2, 1])];
        let (d, _, _) = hinge_d_loss(&zr, &zr);
        assert!((d - 2.0).abs() < 1e-12, "d {d}");
        let (g, _) = hinge_g_loss(&zr);
        assert!(g.abs() < 1e-12, "g {g}");
    }

    #[test]
    fn hinge_matches_direct_summation_oracle() {
        let mut r = stream(23, "hinge-oracle");
        let real = rng::uniform::<f64>(&mut r, &[1, 1, 4, 4], -2.0, 2.0);
        let fake = rng::uniform::<f64>(&mut r, &[1, 1, 4, 4], -2.0, 2.0);
        let (d, _, _) = hinge_d_loss(&[real.clone()], &[fake.clone()]);
        let want_d: f64 = real.data().iter().map(|s| (1.0 - s).max(0.0)).sum::<f64>() / 16.0
            + fake.data().iter().map(|s| (1.0 + s).max(0.0)).sum::<f64>() / 16.0;
        assert!((d - want_d).abs() < 1e-12);
        let (g, _) = hinge_g_loss(&[fake.clone()]);
        let want_g: f64 = -fake.data().iter().sum::<f64>() / 16.0;
        assert!((g - want_g).abs() < 1e-12);
    }

    #[test]
    fn hinge_gradients_match_finite_differences() {
        // keep scores away from the margin kink at |s| = 1
        let mut r = stream(24, "hinge-grad");
        let mk = |r: &mut rand_chacha::ChaCha8Rng| {
            let mut t = rng::uniform::<f64>(r, &[1, 1, 3, 3], -0.8, 0.8);
            t.map_inplace(|v| if v > 0.0 { v + 0.1 } else { v - 0.1 });
            t
        };
        let real = mk(&mut r);
        let fake = mk(&mut r);
        let (_, gr, gf) = hinge_d_loss(&[real.clone()], &[fake.clone()]);
        let err_r = check_grad(&real, &gr[0], GRADCHECK_EPS, |t| {
            hinge_d_loss(&[t.clone()], &[fake.clone()]).0
        });
        let err_f = check_grad(&fake, &gf[0], GRADCHECK_EPS, |t| {
            hinge_d_loss(&[real.clone()], &[t.clone()]).0
        });
        assert!(err_r < GRADCHECK_TOL && err_f < GRADCHECK_TOL, "{err_r} {err_f}");
    }

    #[test]
    fn feature_matching_examples_and_oracle() {
        let mut r = stream(25, "fm");
        let a = rng::randn::<f64>(&mut r, &[1, 2, 3, 3], 1.0);
        let b = rng::randn::<f64>(&mut r, &[1, 3, 2, 2], 1.0);
        // identical activations: zero loss
        let (z, _) = feature_matching(&[vec![a.clone(), b.clone()]], &[vec![a.clone(), b.clone()]]).unwrap();
        assert!(z.abs() < 1e-15);
        // fake = real + 1 at one layer: contribution exactly 1
        let shifted = a.map(|v| v + 1.0);
        let (one, _) =
            feature_matching(&[vec![a.clone(), b.clone()]], &[vec![shifted, b.clone()]]).unwrap();
        assert!((one - 1.0).abs() < 1e-12, "shift contribution {one}");
        // random pair vs direct summation
        let fa = rng::randn::<f64>(&mut r, &[1, 2, 3, 3], 1.0);
        let fb = rng::randn::<f64>(&mut r, &[1, 3, 2, 2], 1.0);
        let (l, g) = feature_matching(&[vec![a.clone(), b.clone()]], &[vec![fa.clone(), fb.clone()]]).unwrap();
        let want: f64 = a.data().iter().zip(fa.data()).map(|(x, y)| (y - x).abs()).sum::<f64>() / 18.0
            + b.data().iter().zip(fb.data()).map(|(x, y)| (y - x).abs()).sum::<f64>() / 12.0;
        assert!((l - want).abs() < 1e-12);
        // gradcheck on the fake side
        let err = check_grad(&fa, &g[0][0], GRADCHECK_EPS, |t| {
            feature_matching(&[vec![a.clone(), b.clone()]], &[vec![t.clone(), fb.clone()]]).unwrap().0
        });
        assert!(err < GRADCHECK_TOL, "fm grad err {err}");
        // mismatched layer counts are rejected
        assert!(feature_matching(&[vec![a.clone()]], &[vec![a.clone(), b.clone()]]).is_err());
    }

    #[test]
    fn masked_l1_examples_and_gradient() {
        let mut r = stream(26, "ml1");
        let a = rng::randn::<f64>(&mut r, &[1, 3, 4, 4], 1.0);
        // identical tensors on a full mask: zero
        let full = Mask::filled(4, 4);
        let (z, _, empty) = masked_l1(&a, &a, &full);
        assert!(z.abs() < 1e-15 && !empty);
        // constant offset of 0.5: loss exactly 0.5
        let b = a.map(|v| v - 0.5);
        let (half, _, _) = masked_l1(&a, &b, &full);
        assert!((half - 0.5).abs() < 1e-12);
        // empty mask signals the degenerate case and contributes nothing
        let (zero, g, empty) = masked_l1(&a, &b, &Mask::empty(4, 4));
        assert!(zero == 0.0 && empty && g.abs_max() == 0.0);
        // random pair on a random mask vs direct summation + gradcheck
        let m = Mask::new(4, 4, (0..16).map(|i| u8::from(i % 3 != 1)).collect()).unwrap();
        let c = rng::randn::<f64>(&mut r, &[1, 3, 4, 4], 1.0);
        let (l, g, _) = masked_l1(&a, &c, &m);
        let mut want = 0.0;
        for ci in 0..3 {
            for i in 0..16 {
                if m.data()[i] == 1 {
                    want += (a.plane(0, ci)[i] - c.plane(0, ci)[i]).abs();
                }
            }
        }
        want /= (m.count() * 3) as f64;
        assert!((l - want).abs() < 1e-12);
        let err = check_grad(&a, &g, GRADCHECK_EPS, |t| masked_l1(t, &c, &m).0);
        assert!(err < GRADCHECK_TOL, "masked l1 grad err {err}");
    }
}
