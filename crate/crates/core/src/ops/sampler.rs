//! Bilinear grid sampling: read an input map at fractional, normalized
//! coordinates. Coordinates live in [-1, 1] per axis ((-1,-1) = top-left
//! pixel center, (1,1) = bottom-right); out-of-range reads clamp to the
//! border. Gradients flow to both the input map and the coordinate grid;
//! clamped coordinates get zero coordinate-gradient, matching the true
//! (one-sided) derivative of the clamp.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[inline]
fn unnormalize<E: Element>(coord: E, extent: usize) -> (E, bool) {
    // map [-1,1] onto [0, extent-1], then clamp to the border
    let half = E::from_f64((extent - 1) as f64 * 0.5);
    let p = (coord + E::ONE) * half;
    let hi = E::from_usize(extent - 1);
    if p < E::ZERO {
        (E::ZERO, true)
    } else if p > hi {
        (hi, true)
    } else {
        (p, false)
    }
}

#[inline]
fn corners<E: Element>(p: E, extent: usize) -> (usize, usize, E) {
    let i0f = p.floor();
    let mut i0 = i0f.to_f64() as usize;
    if i0 + 1 > extent - 1 {
        i0 = extent.saturating_sub(2).min(i0); // keep i1 in range; at the top edge frac becomes 1
    }
    let i1 = (i0 + 1).min(extent - 1);
    let frac = p - E::from_usize(i0);
    (i0, i1, frac)
}

/// Sample `x` [N,C,H,W] at `grid` [N,2,Hg,Wg]; channel 0 of the grid is the
/// horizontal coordinate, channel 1 the vertical. Output is [N,C,Hg,Wg].
pub fn grid_sample<E: Element>(x: &Tensor<E>, grid: &Tensor<E>) -> Result<Tensor<E>> {
    if x.rank() != 4 || grid.rank() != 4 || grid.dim(1) != 2 || grid.dim(0) != x.dim(0) {
        return Err(Error::Shape(format!(
            "grid_sample input {:?} grid {:?}",
            x.shape(),
            grid.shape()
        )));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (hg, wg) = (grid.dim(2), grid.dim(3));
    let mut y = Tensor::zeros(&[n, c, hg, wg]);
    for ni in 0..n {
        let gx_plane = grid.plane(ni, 0);
        let gy_plane = grid.plane(ni, 1);
        for p in 0..hg * wg {
            let (px, _) = unnormalize(gx_plane[p], w);
            let (py, _) = unnormalize(gy_plane[p], h);
            let (x0, x1, fx) = corners(px, w);
            let (y0, y1, fy) = corners(py, h);
            let w00 = (E::ONE - fy) * (E::ONE - fx);
            let w01 = (E::ONE - fy) * fx;
            let w10 = fy * (E::ONE - fx);
            let w11 = fy * fx;
            for ci in 0..c {
                let xp = x.plane(ni, ci);
                let v = w00 * xp[y0 * w + x0]
                    + w01 * xp[y0 * w + x1]
                    + w10 * xp[y1 * w + x0]
                    + w11 * xp[y1 * w + x1];
                y.plane_mut(ni, ci)[p] = v;
            }
        }
    }
    Ok(y)
}

/// Gradients with respect to the sampled map and the grid coordinates.
pub fn grid_sample_backward<E: Element>(
    x: &Tensor<E>,
    grid: &Tensor<E>,
    gy: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (hg, wg) = (grid.dim(2), grid.dim(3));
    if gy.shape() != [n, c, hg, wg] {
        return Err(Error::Shape(format!(
            "grid_sample_backward upstream {:?}, want {:?}",
            gy.shape(),
            [n, c, hg, wg]
        )));
    }
    let mut gx = Tensor::zeros(x.shape());
    let mut ggrid = Tensor::zeros(grid.shape());
    let half_w = E::from_f64((w - 1) as f64 * 0.5);
    let half_h = E::from_f64((h - 1) as f64 * 0.5);
    for ni in 0..n {
        let gxc_plane = grid.plane(ni, 0);
        let gyc_plane = grid.plane(ni, 1);
        for p in 0..hg * wg {
            let (px, clamped_x) = unnormalize(gxc_plane[p], w);
            let (py, clamped_y) = unnormalize(gyc_plane[p], h);
            let (x0, x1, fx) = corners(px, w);
            let (y0, y1, fy) = corners(py, h);
            let w00 = (E::ONE - fy) * (E::ONE - fx);
            let w01 = (E::ONE - fy) * fx;
            let w10 = fy * (E::ONE - fx);
            let w11 = fy * fx;
            let mut d_px = E::ZERO;
            let mut d_py = E::ZERO;
            for ci in 0..c {
                let g = gy.plane(ni, ci)[p];
                let off = gx.plane_offset(ni, ci);
                {
                    let gp = &mut gx.data_mut()[off..off + h * w];
                    gp[y0 * w + x0] += g * w00;
                    gp[y0 * w + x1] += g * w01;
                    gp[y1 * w + x0] += g * w10;
                    gp[y1 * w + x1] += g * w11;
                }
                let xp = x.plane(ni, ci);
                let (v00, v01, v10, v11) =
                    (xp[y0 * w + x0], xp[y0 * w + x1], xp[y1 * w + x0], xp[y1 * w + x1]);
                d_px += g * ((E::ONE - fy) * (v01 - v00) + fy * (v11 - v10));
                d_py += g * ((E::ONE - fx) * (v10 - v00) + fx * (v11 - v01));
            }
            if !clamped_x {
                ggrid.plane_mut(ni, 0)[p] = d_px * half_w;
            }
            if !clamped_y {
                ggrid.plane_mut(ni, 1)[p] = d_py * half_h;
            }
        }
    }
    Ok((gx, ggrid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::gradcheck::{check_grad, GRADCHECK_EPS, GRADCHECK_TOL};
    use crate::rng;

    /// Identity grid: coordinate of each pixel's own center.
    fn identity_grid(n: usize, h: usize, w: usize) -> Tensor<f64> {
        let mut g = Tensor::zeros(&[n, 2, h, w]);
        for ni in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let nx = if w > 1 { 2.0 * x as f64 / (w - 1) as f64 - 1.0 } else { 0.0 };
                    let ny = if h > 1 { 2.0 * y as f64 / (h - 1) as f64 - 1.0 } else { 0.0 };
                    g.set4(ni, 0, y, x, nx);
                    g.set4(ni, 1, y, x, ny);
                }
            }
        }
        g
    }

    #[test]
    fn identity_grid_reproduces_input() {
        let x = rng::randn::<f64>(&mut rng::stream(1, "gs"), &[2, 3, 5, 7], 1.0);
        let g = identity_grid(2, 5, 7);
        let y = grid_sample(&x, &g).unwrap();
        let diff = y.sub(&x).unwrap().abs_max();
        assert!(diff < 1e-12, "identity sampling deviates by {}", diff);
    }

    #[test]
    fn half_pixel_shift_averages_neighbors() {
        // sampling midway between two pixels on a 1x2 image gives their mean
        let x = Tensor::new(&[1, 1, 1, 2], vec![1.0f64, 3.0]).unwrap();
        let grid = Tensor::new(&[1, 2, 1, 1], vec![0.0, 0.0]).unwrap();
        let y = grid_sample(&x, &grid).unwrap();
        assert!((y.data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_coordinates_clamp_to_border() {
        let x = Tensor::new(&[1, 1, 1, 3], vec![5.0f64, 6.0, 7.0]).unwrap();
        let grid = Tensor::new(&[1, 2, 1, 2], vec![-3.0, 3.0, 0.0, 0.0]).unwrap();
        let y = grid_sample(&x, &grid).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng::stream(2, "gs-grad");
        let x = rng::randn::<f64>(&mut r, &[1, 2, 5, 6], 1.0);
        // interior coordinates away from lattice points and borders so the
        // loss is locally smooth
        let grid = rng::uniform::<f64>(&mut r, &[1, 2, 3, 4], -0.77, 0.77)
            .map(|v| if (v * 2.5).fract().abs() < 0.02 { v + 0.03 } else { v });
        let cot = rng::randn::<f64>(&mut r, &[1, 2, 3, 4], 1.0);
        let (gx, gg) = grid_sample_backward(&x, &grid, &cot).unwrap();

        let e = check_grad(&x, &gx, GRADCHECK_EPS, |t| {
            grid_sample(t, &grid).unwrap().mul(&cot).unwrap().sum()
        });
        assert!(e < GRADCHECK_TOL, "map grad rel err {}", e);

        let e = check_grad(&grid, &gg, GRADCHECK_EPS, |t| {
            grid_sample(&x, t).unwrap().mul(&cot).unwrap().sum()
        });
        assert!(e < GRADCHECK_TOL, "grid grad rel err {}", e);
    }
}
