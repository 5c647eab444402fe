//! Factor-of-two resampling. Nearest-neighbor upsampling for feature maps
//! and one-hot label planes; area (2x2 mean) downsampling for images and
//! encoder pyramids. Both directions have exact adjoint backward passes.

use crate::element::Element;
use crate::tensor::Tensor;

pub fn upsample_nearest_2x<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let mut y = Tensor::zeros(&[n, c, h * 2, w * 2]);
    for ni in 0..n {
        for ci in 0..c {
            let xp = x.plane(ni, ci);
            let yp = y.plane_mut(ni, ci);
            for iy in 0..h {
                for ix in 0..w {
                    let v = xp[iy * w + ix];
                    let o = (iy * 2) * (w * 2) + ix * 2;
                    yp[o] = v;
                    yp[o + 1] = v;
                    yp[o + w * 2] = v;
                    yp[o + w * 2 + 1] = v;
                }
            }
        }
    }
    y
}

/// Adjoint of nearest upsampling: each source cell collects its 2x2 copies.
pub fn upsample_nearest_2x_backward<E: Element>(gy: &Tensor<E>) -> Tensor<E> {
    let (n, c, h2, w2) = (gy.dim(0), gy.dim(1), gy.dim(2), gy.dim(3));
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Tensor::zeros(&[n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            let gp = gy.plane(ni, ci);
            let op = gx.plane_mut(ni, ci);
            for iy in 0..h {
                for ix in 0..w {
                    let o = (iy * 2) * w2 + ix * 2;
                    op[iy * w + ix] = gp[o] + gp[o + 1] + gp[o + w2] + gp[o + w2 + 1];
                }
            }
        }
    }
    gx
}

pub fn downsample_area_2x<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (h2, w2) = (h / 2, w / 2);
    let quarter = E::from_f64(0.25);
    let mut y = Tensor::zeros(&[n, c, h2, w2]);
    for ni in 0..n {
        for ci in 0..c {
            let xp = x.plane(ni, ci);
            let yp = y.plane_mut(ni, ci);
            for oy in 0..h2 {
                for ox in 0..w2 {
                    let i = (oy * 2) * w + ox * 2;
                    yp[oy * w2 + ox] = (xp[i] + xp[i + 1] + xp[i + w] + xp[i + w + 1]) * quarter;
                }
            }
        }
    }
    y
}

/// Adjoint of 2x2 averaging: spread each upstream value by 1/4.
pub fn downsample_area_2x_backward<E: Element>(gy: &Tensor<E>) -> Tensor<E> {
    let (n, c, h2, w2) = (gy.dim(0), gy.dim(1), gy.dim(2), gy.dim(3));
    let (h, w) = (h2 * 2, w2 * 2);
    let quarter = E::from_f64(0.25);
    let mut gx = Tensor::zeros(&[n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            let gp = gy.plane(ni, ci);
            let op = gx.plane_mut(ni, ci);
            for oy in 0..h2 {
                for ox in 0..w2 {
                    let g = gp[oy * w2 + ox] * quarter;
                    let i = (oy * 2) * w + ox * 2;
                    op[i] = g;
                    op[i + 1] = g;
                    op[i + w] = g;
                    op[i + w + 1] = g;
                }
            }
        }
    }
    gx
}

/// Nearest-neighbor halving: keep the top-left cell of every 2x2 block.
/// Used for label-like planes (one-hot maps, probabilities, masks) whose
/// values must not be mixed across classes.
pub fn downsample_nearest_2x<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (h2, w2) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[n, c, h2, w2]);
    for ni in 0..n {
        for ci in 0..c {
            let xp = x.plane(ni, ci);
            let yp = y.plane_mut(ni, ci);
            for oy in 0..h2 {
                for ox in 0..w2 {
                    yp[oy * w2 + ox] = xp[(oy * 2) * w + ox * 2];
                }
            }
        }
    }
    y
}

/// Adjoint of nearest halving: scatter each upstream value back to the
/// top-left cell it was read from.
pub fn downsample_nearest_2x_backward<E: Element>(gy: &Tensor<E>) -> Tensor<E> {
    let (n, c, h2, w2) = (gy.dim(0), gy.dim(1), gy.dim(2), gy.dim(3));
    let (h, w) = (h2 * 2, w2 * 2);
    let mut gx = Tensor::zeros(&[n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            let gp = gy.plane(ni, ci);
            let op = gx.plane_mut(ni, ci);
            for oy in 0..h2 {
                for ox in 0..w2 {
                    op[(oy * 2) * w + ox * 2] = gp[oy * w2 + ox];
                }
            }
        }
    }
    gx
}

/// Repeated area halving down to the requested size (dimensions must be
/// reachable by factors of two).
pub fn downsample_area_to<E: Element>(x: &Tensor<E>, h: usize, w: usize) -> Tensor<E> {
    let mut cur = x.clone();
    while cur.dim(2) > h || cur.dim(3) > w {
        assert!(cur.dim(2) % 2 == 0 && cur.dim(3) % 2 == 0, "resize path must halve cleanly");
        cur = downsample_area_2x(&cur);
    }
    assert_eq!((cur.dim(2), cur.dim(3)), (h, w), "target not reachable by halving");
    cur
}

/// Repeated nearest doubling up to the requested size.
pub fn upsample_nearest_to<E: Element>(x: &Tensor<E>, h: usize, w: usize) -> Tensor<E> {
    let mut cur = x.clone();
    while cur.dim(2) < h || cur.dim(3) < w {
        cur = upsample_nearest_2x(&cur);
    }
    assert_eq!((cur.dim(2), cur.dim(3)), (h, w), "target not reachable by doubling");
    cur
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::gradcheck::{check_grad, GRADCHECK_EPS, GRADCHECK_TOL};
    use crate::rng;

    #[test]
    fn upsample_repeats_and_downsample_averages() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let up = upsample_nearest_2x(&x);
        assert_eq!(up.at4(0, 0, 0, 0), 1.0);
        assert_eq!(up.at4(0, 0, 0, 1), 1.0);
        assert_eq!(up.at4(0, 0, 3, 3), 4.0);
        let down = downsample_area_2x(&up);
        assert_eq!(down, x); // area-mean of constant 2x2 blocks recovers the source
    }

    #[test]
    fn down_then_up_of_constant_is_identity() {
        let x = Tensor::full(&[1, 2, 4, 4], 0.75f64);
        let y = upsample_nearest_2x(&downsample_area_2x(&x));
        assert_eq!(y, x);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng::stream(12, "resize-grad");
        let x = rng::randn::<f64>(&mut r, &[1, 2, 4, 6], 1.0);
        let cot_up = rng::randn::<f64>(&mut r, &[1, 2, 8, 12], 1.0);
        let g = upsample_nearest_2x_backward(&cot_up);
        let e = check_grad(&x, &g, GRADCHECK_EPS, |t| {
            upsample_nearest_2x(t).mul(&cot_up).unwrap().sum()
        });
        assert!(e < GRADCHECK_TOL, "upsample rel err {}", e);

        let cot_down = rng::randn::<f64>(&mut r, &[1, 2, 2, 3], 1.0);
        let g = downsample_area_2x_backward(&cot_down);
        let e = check_grad(&x, &g, GRADCHECK_EPS, |t| {
            downsample_area_2x(t).mul(&cot_down).unwrap().sum()
        });
        assert!(e < GRADCHECK_TOL, "downsample rel err {}", e);

        let g = downsample_nearest_2x_backward(&cot_down);
        let e = check_grad(&x, &g, GRADCHECK_EPS, |t| {
            downsample_nearest_2x(t).mul(&cot_down).unwrap().sum()
        });
        assert!(e < GRADCHECK_TOL, "nearest downsample rel err {}", e);
    }

    #[test]
    fn nearest_downsample_keeps_top_left_values() {
        let x = Tensor::new(&[1, 1, 2, 4], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let y = downsample_nearest_2x(&x);
        assert_eq!(y.data(), &[1.0, 3.0]);
        // one-hot planes stay exactly one-hot after halving
        let oh = Tensor::new(&[1, 2, 2, 2], vec![1.0f64, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let yh = downsample_nearest_2x(&oh);
        assert_eq!(yh.data(), &[1.0, 0.0]);
    }
}
