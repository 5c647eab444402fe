//! Per-pixel channel softmax and cross-entropy. The loss path against
//! one-hot targets is fused with the softmax for numerical stability; the
//! unfused softmax exists for consumers that feed probabilities onward
//! (e.g. a discriminator) and need gradients routed back through it.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Softmax over axis 1 of NCHW, independently per (n, y, x).
pub fn softmax_channels<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let hw = h * w;
    let mut y = Tensor::zeros(x.shape());
    for ni in 0..n {
        for p in 0..hw {
            let mut mx = x.data()[ni * c * hw + p];
            for ci in 1..c {
                mx = mx.maxv(x.data()[(ni * c + ci) * hw + p]);
            }
            let mut z = E::ZERO;
            for ci in 0..c {
                let e = (x.data()[(ni * c + ci) * hw + p] - mx).exp();
                y.data_mut()[(ni * c + ci) * hw + p] = e;
                z += e;
            }
            for ci in 0..c {
                y.data_mut()[(ni * c + ci) * hw + p] /= z;
            }
        }
    }
    y
}

/// gx_c = p_c * (g_c - sum_k g_k p_k), per pixel.
pub fn softmax_channels_backward<E: Element>(probs: &Tensor<E>, gy: &Tensor<E>) -> Tensor<E> {
    let (n, c, h, w) = (probs.dim(0), probs.dim(1), probs.dim(2), probs.dim(3));
    let hw = h * w;
    let mut gx = Tensor::zeros(probs.shape());
    for ni in 0..n {
        for p in 0..hw {
            let mut dot = E::ZERO;
            for ci in 0..c {
                let i = (ni * c + ci) * hw + p;
                dot += gy.data()[i] * probs.data()[i];
            }
            for ci in 0..c {
                let i = (ni * c + ci) * hw + p;
                gx.data_mut()[i] = probs.data()[i] * (gy.data()[i] - dot);
            }
        }
    }
    gx
}

/// Mean over all pixels of -sum_c t_c log p_c where p = softmax(logits).
/// Returns the loss and its gradient with respect to the logits,
/// (p - t) / (N*H*W). Targets are expected one-hot (or a distribution).
pub fn softmax_cross_entropy<E: Element>(
    logits: &Tensor<E>,
    target: &Tensor<E>,
) -> Result<(E, Tensor<E>)> {
    if logits.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "cross entropy logits {:?} vs target {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    let (n, c, h, w) = (logits.dim(0), logits.dim(1), logits.dim(2), logits.dim(3));
    let hw = h * w;
    let sites = E::from_usize(n * hw);
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = E::ZERO;
    for ni in 0..n {
        for p in 0..hw {
            let mut mx = logits.data()[ni * c * hw + p];
            for ci in 1..c {
                mx = mx.maxv(logits.data()[(ni * c + ci) * hw + p]);
            }
            let mut z = E::ZERO;
            for ci in 0..c {
                z += (logits.data()[(ni * c + ci) * hw + p] - mx).exp();
            }
            let logz = z.ln() + mx;
            for ci in 0..c {
                let i = (ni * c + ci) * hw + p;
                let logp = logits.data()[i] - logz;
                let t = target.data()[i];
                loss -= t * logp;
                grad.data_mut()[i] = (logp.exp() - t) / sites;
            }
        }
    }
    Ok((loss / sites, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::gradcheck::{check_grad, GRADCHECK_EPS, GRADCHECK_TOL};
    use crate::rng;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = rng::randn::<f64>(&mut rng::stream(2, "sm"), &[2, 5, 3, 4], 2.0);
        let p = softmax_channels(&x);
        for ni in 0..2 {
            for y in 0..3 {
                for xx in 0..4 {
                    let s: f64 = (0..5).map(|c| p.at4(ni, c, y, xx)).sum();
                    assert!((s - 1.0).abs() < 1e-12, "pixel sum {}", s);
                    for c in 0..5 {
                        assert!(p.at4(ni, c, y, xx) > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        let x = Tensor::full(&[1, 4, 2, 2], 3.25f64);
        let p = softmax_channels(&x);
        for &v in p.data() {
            assert!((v - 0.25).abs() < 1e-14);
        }
    }

    #[test]
    fn cross_entropy_of_perfect_prediction_is_small() {
        // massively confident correct logits: loss ~ 0
        let mut logits = Tensor::zeros(&[1, 3, 2, 2]);
        let mut target = Tensor::zeros(&[1, 3, 2, 2]);
        for p in 0..4 {
            logits.data_mut()[p] = 50.0;
            target.data_mut()[p] = 1.0;
        }
        let (l, _) = softmax_cross_entropy(&logits, &target).unwrap();
        assert!(l < 1e-12, "loss {}", l);
    }

    #[test]
    fn cross_entropy_of_uniform_prediction_is_log_c() {
        let logits = Tensor::zeros(&[2, 4, 3, 3]);
        let mut target = Tensor::zeros(&[2, 4, 3, 3]);
        for ni in 0..2 {
            for p in 0..9 {
                target.data_mut()[(ni * 4) * 9 + p] = 1.0;
            }
        }
        let (l, _) = softmax_cross_entropy(&logits, &target).unwrap();
        assert!((l - (4.0f64).ln()).abs() < 1e-12, "loss {} vs ln 4", l);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng::stream(9, "sm-grad");
        let x = rng::randn::<f64>(&mut r, &[2, 4, 3, 2], 1.0);
        let cot = rng::randn::<f64>(&mut r, &[2, 4, 3, 2], 1.0);
        let p = softmax_channels(&x);
        let g = softmax_channels_backward(&p, &cot);
        let e =
            check_grad(&x, &g, GRADCHECK_EPS, |t| softmax_channels(t).mul(&cot).unwrap().sum());
        assert!(e < GRADCHECK_TOL, "softmax rel err {}", e);

        // one-hot target per pixel
        let mut target = Tensor::zeros(&[2, 4, 3, 2]);
        let mut pick = rng::stream(10, "sm-pick");
        use rand::Rng;
        for ni in 0..2 {
            for pix in 0..6 {
                let c = pick.gen_range(0..4usize);
                target.data_mut()[(ni * 4 + c) * 6 + pix] = 1.0;
            }
        }
        let (_, g) = softmax_cross_entropy(&x, &target).unwrap();
        let e = check_grad(&x, &g, GRADCHECK_EPS, |t| {
            softmax_cross_entropy(t, &target).unwrap().0
        });
        assert!(e < GRADCHECK_TOL, "cross entropy rel err {}", e);
    }
}
