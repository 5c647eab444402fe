//! Thin-plate-spline warping on a 5x5 control grid.
//!
//! The warp maps output-image coordinates to source coordinates: the
//! interpolant is solved so that canonical grid site p_i reads from source
//! location p_i + theta_i, and every output pixel follows smoothly. Because
//! the control sites are fixed, the solve collapses to a precomputed linear
//! map: grid = identity + M * theta, which makes the theta-gradient exact
//! and cheap.
//!
//! Radial basis U(r) = r^2 log r^2 with the standard augmented system
//! [[K, P], [P^T, 0]]; a custom control-point constructor rejects
//! configurations that make the system singular (duplicate or collinear
//! sites).

use crate::element::Element;
use crate::error::{Error, Result};
use crate::masks::Mask;
use crate::ops::sampler::{grid_sample, grid_sample_backward};
use crate::tensor::Tensor;

pub const TPS_GRID_N: usize = 5;
pub const TPS_POINTS: usize = TPS_GRID_N * TPS_GRID_N;
const AUG: usize = TPS_POINTS + 3;

/// Horizontal separations smaller than this are clamped (sign-preserving)
/// when computing neighbor slopes in the grid constraint.
pub const SLOPE_CLAMP: f64 = 1e-6;

/// Canonical control sites: row-major 5x5 lattice over [-1,1]^2, rows top to
/// bottom. Returned as (x, y) pairs.
pub fn canonical_grid() -> Vec<[f64; 2]> {
    let mut pts = Vec::with_capacity(TPS_POINTS);
    for i in 0..TPS_GRID_N {
        for j in 0..TPS_GRID_N {
            let y = -1.0 + 2.0 * i as f64 / (TPS_GRID_N - 1) as f64;
            let x = -1.0 + 2.0 * j as f64 / (TPS_GRID_N - 1) as f64;
            pts.push([x, y]);
        }
    }
    pts
}

#[inline]
fn rbf(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// LU factorization with partial pivoting; returns the factor, the
/// permutation, and the pivot magnitude range for conditioning diagnostics.
fn lu_factor(mut a: Vec<f64>, n: usize) -> Result<(Vec<f64>, Vec<usize>, f64, f64)> {
    let mut perm: Vec<usize> = (0..n).collect();
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut min_piv = f64::INFINITY;
    let mut max_piv = 0.0f64;
    for k in 0..n {
        let mut p = k;
        let mut best = a[k * n + k].abs();
        for r in k + 1..n {
            let v = a[r * n + k].abs();
            if v > best {
                best = v;
                p = r;
            }
        }
        if best < 1e-12 * scale.max(1.0) {
            return Err(Error::DegenerateWarp(format!(
                "system pivot {:.3e} below threshold (matrix scale {:.3e}); control points are \
                 coincident or collinear",
                best, scale
            )));
        }
        if p != k {
            perm.swap(k, p);
            for c in 0..n {
                a.swap(k * n + c, p * n + c);
            }
        }
        let piv = a[k * n + k];
        min_piv = min_piv.min(piv.abs());
        max_piv = max_piv.max(piv.abs());
        for r in k + 1..n {
            let f = a[r * n + k] / piv;
            a[r * n + k] = f;
            for c in k + 1..n {
                a[r * n + c] -= f * a[k * n + c];
            }
        }
    }
    Ok((a, perm, min_piv, max_piv))
}

fn lu_solve(lu: &[f64], perm: &[usize], n: usize, b: &[f64], out: &mut [f64]) {
    for i in 0..n {
        out[i] = b[perm[i]];
    }
    for i in 0..n {
        let mut s = out[i];
        for j in 0..i {
            s -= lu[i * n + j] * out[j];
        }
        out[i] = s;
    }
    for i in (0..n).rev() {
        let mut s = out[i];
        for j in i + 1..n {
            s -= lu[i * n + j] * out[j];
        }
        out[i] = s / lu[i * n + i];
    }
}

pub struct TpsWarper<E: Element> {
    h: usize,
    w: usize,
    points: Vec<[f64; 2]>,
    /// (h*w) x TPS_POINTS map from per-site offsets to per-pixel offsets.
    m: Vec<E>,
    /// [1, 2, h, w] normalized coordinates of each pixel center.
    identity: Tensor<E>,
    /// Columns 0..TPS_POINTS of the inverse system matrix (f64 for the
    /// interpolation/diagnostic paths).
    linv: Vec<f64>, // AUG x TPS_POINTS
}

impl<E: Element> TpsWarper<E> {
    /// Warper over the canonical 5x5 grid; cannot be degenerate.
    pub fn new(h: usize, w: usize) -> Self {
        Self::with_control_points(h, w, canonical_grid()).expect("canonical grid is well posed")
    }

    /// Warper over caller-supplied control sites. Rejects configurations
    /// that make the TPS system singular.
    pub fn with_control_points(h: usize, w: usize, points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() != TPS_POINTS {
            return Err(Error::InvalidArgument(format!(
                "need {} control points, got {}",
                TPS_POINTS,
                points.len()
            )));
        }
        if h < 2 || w < 2 {
            return Err(Error::InvalidArgument("warp target must be at least 2x2".into()));
        }
        // augmented system [[K, P],[P^T, 0]]
        let mut a = vec![0.0f64; AUG * AUG];
        for i in 0..TPS_POINTS {
            for j in 0..TPS_POINTS {
                let dx = points[i][0] - points[j][0];
                let dy = points[i][1] - points[j][1];
                a[i * AUG + j] = rbf(dx * dx + dy * dy);
            }
            a[i * AUG + TPS_POINTS] = 1.0;
            a[i * AUG + TPS_POINTS + 1] = points[i][0];
            a[i * AUG + TPS_POINTS + 2] = points[i][1];
            a[(TPS_POINTS) * AUG + i] = 1.0;
            a[(TPS_POINTS + 1) * AUG + i] = points[i][0];
            a[(TPS_POINTS + 2) * AUG + i] = points[i][1];
        }
        let (lu, perm, min_piv, max_piv) = lu_factor(a, AUG).map_err(|e| match e {
            Error::DegenerateWarp(msg) => Error::DegenerateWarp(msg),
            other => other,
        })?;
        if min_piv < 1e-10 * max_piv {
            return Err(Error::DegenerateWarp(format!(
                "ill-conditioned system: pivot ratio {:.3e}",
                max_piv / min_piv
            )));
        }
        // first TPS_POINTS columns of the inverse
        let mut linv = vec![0.0f64; AUG * TPS_POINTS];
        let mut e = vec![0.0f64; AUG];
        let mut col = vec![0.0f64; AUG];
        for j in 0..TPS_POINTS {
            e.fill(0.0);
            e[j] = 1.0;
            lu_solve(&lu, &perm, AUG, &e, &mut col);
            for i in 0..AUG {
                linv[i * TPS_POINTS + j] = col[i];
            }
        }
        // per-pixel basis row dotted with Linv gives the offset map M
        let mut m = vec![E::ZERO; h * w * TPS_POINTS];
        let mut identity = Tensor::zeros(&[1, 2, h, w]);
        for py in 0..h {
            for px in 0..w {
                let nx = 2.0 * px as f64 / (w - 1) as f64 - 1.0;
                let ny = 2.0 * py as f64 / (h - 1) as f64 - 1.0;
                identity.set4(0, 0, py, px, E::from_f64(nx));
                identity.set4(0, 1, py, px, E::from_f64(ny));
                let mut basis = [0.0f64; AUG];
                for (i, p) in points.iter().enumerate() {
                    let dx = nx - p[0];
                    let dy = ny - p[1];
                    basis[i] = rbf(dx * dx + dy * dy);
                }
                basis[TPS_POINTS] = 1.0;
                basis[TPS_POINTS + 1] = nx;
                basis[TPS_POINTS + 2] = ny;
                let row = &mut m[(py * w + px) * TPS_POINTS..(py * w + px + 1) * TPS_POINTS];
                for j in 0..TPS_POINTS {
                    let mut acc = 0.0;
                    for i in 0..AUG {
                        acc += basis[i] * linv[i * TPS_POINTS + j];
                    }
                    row[j] = E::from_f64(acc);
                }
            }
        }
        Ok(TpsWarper { h, w, points, m, identity, linv })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    fn check_theta(&self, theta: &Tensor<E>) -> Result<usize> {
        if theta.rank() != 4
            || theta.dim(1) != 2
            || theta.dim(2) != TPS_GRID_N
            || theta.dim(3) != TPS_GRID_N
        {
            return Err(Error::Shape(format!(
                "theta must be [N, 2, {}, {}], got {:?}",
                TPS_GRID_N,
                TPS_GRID_N,
                theta.shape()
            )));
        }
        Ok(theta.dim(0))
    }

    /// Sampling grid [N, 2, h, w]: identity coordinates plus the TPS
    /// interpolation of the per-site offsets.
    pub fn grid(&self, theta: &Tensor<E>) -> Result<Tensor<E>> {
        let n = self.check_theta(theta)?;
        let hw = self.h * self.w;
        let mut g = Tensor::zeros(&[n, 2, self.h, self.w]);
        for ni in 0..n {
            for axis in 0..2 {
                let offs = theta.plane(ni, axis); // 25 values, row-major sites
                let idp = self.identity.plane(0, axis);
                let gp = g.plane_mut(ni, axis);
                for p in 0..hw {
                    let row = &self.m[p * TPS_POINTS..(p + 1) * TPS_POINTS];
                    let mut acc = idp[p];
                    for (mv, &ov) in row.iter().zip(offs.iter()) {
                        acc += *mv * ov;
                    }
                    gp[p] = acc;
                }
            }
        }
        Ok(g)
    }

    /// Adjoint of `grid` with respect to theta.
    pub fn grid_backward(&self, g_grid: &Tensor<E>) -> Tensor<E> {
        let n = g_grid.dim(0);
        let hw = self.h * self.w;
        let mut gt = Tensor::zeros(&[n, 2, TPS_GRID_N, TPS_GRID_N]);
        for ni in 0..n {
            for axis in 0..2 {
                let up = g_grid.plane(ni, axis);
                let out = gt.plane_mut(ni, axis);
                for p in 0..hw {
                    let row = &self.m[p * TPS_POINTS..(p + 1) * TPS_POINTS];
                    let g = up[p];
                    for (o, &mv) in out.iter_mut().zip(row.iter()) {
                        *o += mv * g;
                    }
                }
            }
        }
        gt
    }

    /// Warp an image: sample the source at grid(theta).
    pub fn warp(&self, img: &Tensor<E>, theta: &Tensor<E>) -> Result<Tensor<E>> {
        let g = self.grid(theta)?;
        grid_sample(img, &g)
    }

    /// Gradients of the warp with respect to the source image and theta.
    pub fn warp_backward(
        &self,
        img: &Tensor<E>,
        theta: &Tensor<E>,
        gy: &Tensor<E>,
    ) -> Result<(Tensor<E>, Tensor<E>)> {
        let g = self.grid(theta)?;
        let (g_img, g_grid) = grid_sample_backward(img, &g, gy)?;
        Ok((g_img, self.grid_backward(&g_grid)))
    }

    /// Warp a binary mask with the same kernel and re-binarize at 0.5.
    pub fn warp_mask(&self, mask: &Mask, theta: &Tensor<E>) -> Result<Mask> {
        let t = mask.to_tensor::<E>();
        let warped = self.warp(&t, theta)?;
        Ok(Mask::from_tensor(&warped))
    }

    /// Evaluate the raw interpolant at an arbitrary normalized point, in
    /// f64. Used to verify the interpolation property at control sites.
    pub fn eval_interpolant(&self, theta: &Tensor<E>, at: [f64; 2]) -> Result<[f64; 2]> {
        self.check_theta(theta)?;
        let mut basis = vec![0.0f64; AUG];
        for (i, p) in self.points.iter().enumerate() {
            let dx = at[0] - p[0];
            let dy = at[1] - p[1];
            basis[i] = rbf(dx * dx + dy * dy);
        }
        basis[TPS_POINTS] = 1.0;
        basis[TPS_POINTS + 1] = at[0];
        basis[TPS_POINTS + 2] = at[1];
        let mut out = [0.0f64; 2];
        for axis in 0..2 {
            // coefficients = Linv * targets, with targets = site + offset
            let offs = theta.plane(0, axis);
            let mut acc = 0.0;
            for i in 0..AUG {
                let mut coeff = 0.0;
                for j in 0..TPS_POINTS {
                    let target = self.points[j][axis] + offs[j].to_f64();
                    coeff += self.linv[i * TPS_POINTS + j] * target;
                }
                acc += basis[i] * coeff;
            }
            out[axis] = acc;
        }
        Ok(out)
    }
}

// ---- grid regularity constraint ----------------------------------------

#[inline]
fn clamp_dx<E: Element>(d: E) -> (E, bool) {
    let lim = E::from_f64(SLOPE_CLAMP);
    if d >= E::ZERO {
        if d < lim {
            (lim, true)
        } else {
            (d, false)
        }
    } else if -d < lim {
        (-lim, true)
    } else {
        (d, false)
    }
}

/// Second-order regularity of the warped control grid. For each interior
/// site p with neighbors p0 (top), p1 (bottom), p2 (left), p3 (right), all
/// taken at their warped positions p + theta:
///
///   | ||p-p0|| - ||p-p1|| | + | ||p-p2|| - ||p-p3|| |
/// + | S(p0->p) - S(p->p1) | + | S(p2->p) - S(p->p3) |
///
/// where S is the slope dy/dx of the directed segment, the direction fixed
/// in grid order (top to bottom, left to right) so that the clamped
/// denominators of an aligned pair cancel; the denominator is clamped
/// sign-preservingly at SLOPE_CLAMP. Zero exactly on the canonical grid and
/// on any uniform scaling of it.
pub fn const_loss<E: Element>(theta: &Tensor<E>) -> Result<(E, Tensor<E>)> {
    if theta.shape() != [1, 2, TPS_GRID_N, TPS_GRID_N] {
        return Err(Error::Shape(format!(
            "const_loss wants [1, 2, {}, {}], got {:?}",
            TPS_GRID_N,
            TPS_GRID_N,
            theta.shape()
        )));
    }
    let base = canonical_grid();
    let n = TPS_GRID_N;
    let pos = |t: &Tensor<E>, i: usize, j: usize| -> [E; 2] {
        [
            E::from_f64(base[i * n + j][0]) + t.data()[i * n + j],
            E::from_f64(base[i * n + j][1]) + t.data()[n * n + i * n + j],
        ]
    };
    let mut grad = Tensor::zeros(theta.shape());
    let mut loss = E::ZERO;
    // accumulate d(loss)/d(position of site (i,j))
    let add = |g: &mut Tensor<E>, i: usize, j: usize, gx: E, gy: E| {
        g.data_mut()[i * n + j] += gx;
        g.data_mut()[n * n + i * n + j] += gy;
    };
    for i in 1..n - 1 {
        for j in 1..n - 1 {
            let p = pos(theta, i, j);
            let p0 = pos(theta, i - 1, j);
            let p1 = pos(theta, i + 1, j);
            let p2 = pos(theta, i, j - 1);
            let p3 = pos(theta, i, j + 1);

            // distance pair terms: | ||p-a|| - ||p-b|| |
            let dist_pair = |a: [E; 2],
                                 ai: (usize, usize),
                                 b: [E; 2],
                                 bi: (usize, usize),
                                 grad: &mut Tensor<E>|
             -> E {
                let (dax, day) = (p[0] - a[0], p[1] - a[1]);
                let (dbx, dby) = (p[0] - b[0], p[1] - b[1]);
                let da = (dax * dax + day * day).sqrt();
                let db = (dbx * dbx + dby * dby).sqrt();
                let diff = da - db;
                let sign = if diff >= E::ZERO { E::ONE } else { -E::ONE };
                let tiny = E::from_f64(1e-12);
                if da > tiny {
                    let (ux, uy) = (dax / da, day / da);
                    add(grad, i, j, sign * ux, sign * uy);
                    add(grad, ai.0, ai.1, -sign * ux, -sign * uy);
                }
                if db > tiny {
                    let (ux, uy) = (dbx / db, dby / db);
                    add(grad, i, j, -sign * ux, -sign * uy);
                    add(grad, bi.0, bi.1, sign * ux, sign * uy);
                }
                diff.abs()
            };
            loss += dist_pair(p0, (i - 1, j), p1, (i + 1, j), &mut grad);
            loss += dist_pair(p2, (i, j - 1), p3, (i, j + 1), &mut grad);

            // slope pair terms, directed a->b per grid order
            // S = (b.y - a.y) / clamp(b.x - a.x)
            let slope = |a: [E; 2], b: [E; 2]| -> (E, E, bool) {
                let (d, clamped) = clamp_dx(b[0] - a[0]);
                ((b[1] - a[1]) / d, d, clamped)
            };
            let slope_pair = |a: [E; 2],
                                  ai: (usize, usize),
                                  b: [E; 2],
                                  bi: (usize, usize),
                                  grad: &mut Tensor<E>|
             -> E {
                // first segment a -> p, second segment p -> b
                let (s1, d1, c1) = slope(a, p);
                let (s2, d2, c2) = slope(p, b);
                let diff = s1 - s2;
                let sign = if diff >= E::ZERO { E::ONE } else { -E::ONE };
                // d s1 / d p.y = 1/d1 ; d s1 / d a.y = -1/d1
                // d s1 / d p.x = -s1/d1 (if unclamped); d s1 / d a.x = +s1/d1
                add(grad, i, j, E::ZERO, sign / d1);
                add(grad, ai.0, ai.1, E::ZERO, -sign / d1);
                if !c1 {
                    add(grad, i, j, -sign * s1 / d1, E::ZERO);
                    add(grad, ai.0, ai.1, sign * s1 / d1, E::ZERO);
                }
                add(grad, i, j, E::ZERO, sign / d2);
                add(grad, bi.0, bi.1, E::ZERO, -sign / d2);
                if !c2 {
                    add(grad, i, j, -sign * s2 / d2, E::ZERO);
                    add(grad, bi.0, bi.1, sign * s2 / d2, E::ZERO);
                }
                diff.abs()
            };
            // vertical pair: top->p then p->bottom
            loss += slope_pair(p0, (i - 1, j), p1, (i + 1, j), &mut grad);
            // horizontal pair: left->p then p->right
            loss += slope_pair(p2, (i, j - 1), p3, (i, j + 1), &mut grad);
        }
    }
    Ok((loss, grad))
}
