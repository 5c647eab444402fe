//! Spectral weight normalization via power iteration. The weight tensor is
//! viewed as a matrix with its leading dimension as rows; `u` and `v` are
//! persistent state advanced one iteration per optimizer step, and the
//! normalization itself is a pure function of (w, u, v) so its gradient can
//! be checked with frozen vectors.

use crate::element::Element;
use crate::tensor::Tensor;

pub const SIGMA_FLOOR: f64 = 1e-12;

fn rows_cols<E: Element>(w: &Tensor<E>) -> (usize, usize) {
    let rows = w.dim(0);
    (rows, w.numel() / rows)
}

fn normalize_vec<E: Element>(v: &mut [E]) {
    let mut n = E::ZERO;
    for &x in v.iter() {
        n += x * x;
    }
    let n = n.sqrt().maxv(E::from_f64(SIGMA_FLOOR));
    for x in v.iter_mut() {
        *x /= n;
    }
}

/// One power-iteration update: v <- normalize(W^T u), u <- normalize(W v).
pub fn power_iterate<E: Element>(w: &Tensor<E>, u: &mut [E], v: &mut [E]) {
    let (rows, cols) = rows_cols(w);
    debug_assert_eq!(u.len(), rows);
    debug_assert_eq!(v.len(), cols);
    let wd = w.data();
    for j in 0..cols {
        v[j] = E::ZERO;
    }
    for i in 0..rows {
        let ui = u[i];
        let row = &wd[i * cols..(i + 1) * cols];
        for (vj, &wij) in v.iter_mut().zip(row.iter()) {
            *vj += wij * ui;
        }
    }
    normalize_vec(v);
    for i in 0..rows {
        let row = &wd[i * cols..(i + 1) * cols];
        let mut acc = E::ZERO;
        for (&wij, &vj) in row.iter().zip(v.iter()) {
            acc += wij * vj;
        }
        u[i] = acc;
    }
    normalize_vec(u);
}

/// sigma = u^T W v for the current vectors.
pub fn sigma<E: Element>(w: &Tensor<E>, u: &[E], v: &[E]) -> E {
    let (rows, cols) = rows_cols(w);
    let wd = w.data();
    let mut s = E::ZERO;
    for i in 0..rows {
        let row = &wd[i * cols..(i + 1) * cols];
        let mut acc = E::ZERO;
        for (&wij, &vj) in row.iter().zip(v.iter()) {
            acc += wij * vj;
        }
        s += u[i] * acc;
    }
    s
}

/// W_hat = W / max(sigma, floor). Returns the normalized weight and sigma.
pub fn normalized<E: Element>(w: &Tensor<E>, u: &[E], v: &[E]) -> (Tensor<E>, E) {
    let s = sigma(w, u, v).maxv(E::from_f64(SIGMA_FLOOR));
    (w.map(|x| x / s), s)
}

/// Gradient through W_hat = W / sigma(W) with u, v treated as constants:
/// gW = gWhat / sigma - (<gWhat, What> / sigma) * u v^T.
pub fn normalized_backward<E: Element>(
    w: &Tensor<E>,
    u: &[E],
    v: &[E],
    g_what: &Tensor<E>,
) -> Tensor<E> {
    let (rows, cols) = rows_cols(w);
    let s = sigma(w, u, v).maxv(E::from_f64(SIGMA_FLOOR));
    let mut dot = E::ZERO; // <gWhat, What> = <gWhat, W> / sigma
    for (&g, &wv) in g_what.data().iter().zip(w.data().iter()) {
        dot += g * wv;
    }
    dot /= s * s;
    let mut gw = Tensor::zeros(w.shape());
    for i in 0..rows {
        let ui = u[i];
        let grow = &g_what.data()[i * cols..(i + 1) * cols];
        let orow = &mut gw.data_mut()[i * cols..(i + 1) * cols];
        for ((o, &g), &vj) in orow.iter_mut().zip(grow.iter()).zip(v.iter()) {
            *o = g / s - dot * ui * vj;
        }
    }
    gw
}
