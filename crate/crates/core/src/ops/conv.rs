//! 2-D convolution (cross-correlation convention) with zero padding, plus
//! the exact gradients. These loops carry nearly all of the training cost,
//! so the two kernel shapes the networks actually use get dedicated paths:
//!
//! * 3x3 stride 1 pad 1 - register-blocked stencil over zero-padded scratch
//!   rows, nine taps fused per output element;
//! * 4x4 stride 2 pad 1 - input rows are zero-padded and split into
//!   even/odd columns once per plane, which turns every strided tap into a
//!   contiguous run the autovectorizer handles.
//!
//! Everything else (1x1 skips, odd sizes in tests) goes through a generic
//! path that is slower but shape-agnostic. All paths are compared against a
//! six-loop naive reference and finite differences in the tests below.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[inline]
pub fn out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

#[allow(clippy::type_complexity)]
fn check_args<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(Error::Shape(format!(
            "conv2d wants 4-D input and weight, got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, wcin, kh, kw) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    if wcin != cin || kh != kw {
        return Err(Error::Shape(format!(
            "conv2d weight {:?} does not match input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    if b.numel() != cout {
        return Err(Error::Shape(format!("bias has {} entries, want {}", b.numel(), cout)));
    }
    if stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::InvalidArgument(format!(
            "conv2d stride {} pad {} kernel {} on {}x{}",
            stride, pad, kh, h, wd
        )));
    }
    Ok((n, cin, h, wd, cout, kh, out_dim(h, kh, stride, pad), out_dim(wd, kw, stride, pad)))
}

/// y[n,co,oy,ox] = b[co] + sum_{ci,ky,kx} w[co,ci,ky,kx] * x[n,ci,oy*s-p+ky,ox*s-p+kx]
pub fn conv2d<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let (n, cin, h, wd, cout, k, hout, wout) = check_args(x, w, b, stride, pad)?;
    let mut y = Tensor::zeros(&[n, cout, hout, wout]);
    if k == 3 && stride == 1 && pad == 1 {
        conv3_forward(x, w, b, &mut y);
        return Ok(y);
    }
    if k == 4 && stride == 2 && pad == 1 {
        conv4s2_forward(x, w, b, &mut y);
        return Ok(y);
    }
    let wdat = w.data();
    for ni in 0..n {
        for co in 0..cout {
            let bias = b.data()[co];
            let yplane = y.plane_mut(ni, co);
            yplane.fill(bias);
            for ci in 0..cin {
                let xplane = x.plane(ni, ci);
                let wbase = (co * cin + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wdat[wbase + ky * k + kx];
                        accumulate_rows(yplane, xplane, wv, h, wd, hout, wout, stride, pad, ky, kx);
                    }
                }
            }
        }
    }
    Ok(y)
}

/// One (ky,kx) tap in the generic path.
#[inline]
fn accumulate_rows<E: Element>(
    yplane: &mut [E],
    xplane: &[E],
    wv: E,
    h: usize,
    w: usize,
    hout: usize,
    wout: usize,
    stride: usize,
    pad: usize,
    ky: usize,
    kx: usize,
) {
    // valid oy: 0 <= oy*s - p + ky < h
    let oy_lo = pad.saturating_sub(ky).div_ceil(stride).min(hout);
    let oy_hi = if h + pad > ky { ((h + pad - ky - 1) / stride + 1).min(hout) } else { 0 };
    let ox_lo = pad.saturating_sub(kx).div_ceil(stride).min(wout);
    let ox_hi = if w + pad > kx { ((w + pad - kx - 1) / stride + 1).min(wout) } else { 0 };
    if ox_hi <= ox_lo {
        return;
    }
    let len = ox_hi - ox_lo;
    for oy in oy_lo..oy_hi {
        let iy = oy * stride + ky - pad;
        let ix0 = ox_lo * stride + kx - pad;
        let yrow = &mut yplane[oy * wout + ox_lo..oy * wout + ox_hi];
        if stride == 1 {
            let xrow = &xplane[iy * w + ix0..iy * w + ix0 + len];
            for (yo, &xi) in yrow.iter_mut().zip(xrow.iter()) {
                *yo += wv * xi;
            }
        } else {
            let xrow = &xplane[iy * w + ix0..];
            for (j, yo) in yrow.iter_mut().enumerate() {
                *yo += wv * xrow[j * stride];
            }
        }
    }
}

// ---- 3x3 stride 1 pad 1 ------------------------------------------------

/// Copy a plane into a scratch buffer with a one-pixel zero border.
fn pad1<E: Element>(plane: &[E], h: usize, w: usize, out: &mut Vec<E>) {
    let pw = w + 2;
    out.clear();
    out.resize((h + 2) * pw, E::ZERO);
    for y in 0..h {
        out[(y + 1) * pw + 1..(y + 1) * pw + 1 + w].copy_from_slice(&plane[y * w..(y + 1) * w]);
    }
}

/// yrow[j] += sum of nine taps over three padded source rows.
#[inline]
fn stencil3_row<E: Element>(yrow: &mut [E], r0: &[E], r1: &[E], r2: &[E], wt: &[E]) {
    let n = yrow.len();
    let (r0, r1, r2) = (&r0[..n + 2], &r1[..n + 2], &r2[..n + 2]);
    let (w0, w1, w2) = (wt[0], wt[1], wt[2]);
    let (w3, w4, w5) = (wt[3], wt[4], wt[5]);
    let (w6, w7, w8) = (wt[6], wt[7], wt[8]);
    for j in 0..n {
        yrow[j] += w0 * r0[j]
            + w1 * r0[j + 1]
            + w2 * r0[j + 2]
            + w3 * r1[j]
            + w4 * r1[j + 1]
            + w5 * r1[j + 2]
            + w6 * r2[j]
            + w7 * r2[j + 1]
            + w8 * r2[j + 2];
    }
}

fn conv3_forward<E: Element>(x: &Tensor<E>, w: &Tensor<E>, b: &Tensor<E>, y: &mut Tensor<E>) {
    let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let cout = w.dim(0);
    let pw = wd + 2;
    let mut padded = Vec::new();
    for ni in 0..n {
        for co in 0..cout {
            y.plane_mut(ni, co).fill(b.data()[co]);
        }
        for ci in 0..cin {
            pad1(x.plane(ni, ci), h, wd, &mut padded);
            for co in 0..cout {
                let wt = &w.data()[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
                let yp = y.plane_mut(ni, co);
                for oy in 0..h {
                    let r0 = &padded[oy * pw..];
                    let r1 = &padded[(oy + 1) * pw..];
                    let r2 = &padded[(oy + 2) * pw..];
                    stencil3_row(&mut yp[oy * wd..(oy + 1) * wd], r0, r1, r2, wt);
                }
            }
        }
    }
}

// ---- 4x4 stride 2 pad 1 ------------------------------------------------

/// Padded (top 1, bottom 2, left 1, right 2) plane split into even/odd
/// columns per row, so stride-2 taps read contiguous memory.
struct Deinterleaved<E> {
    even: Vec<E>, // ph rows of ev_w
    odd: Vec<E>,  // ph rows of od_w
    ev_w: usize,
    od_w: usize,
}

fn deinterleave4s2<E: Element>(plane: &[E], h: usize, w: usize) -> Deinterleaved<E> {
    let (ph, pw) = (h + 3, w + 3);
    let ev_w = pw.div_ceil(2);
    let od_w = pw / 2;
    let mut even = vec![E::ZERO; ph * ev_w];
    let mut odd = vec![E::ZERO; ph * od_w];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        let er = &mut even[(y + 1) * ev_w..(y + 2) * ev_w];
        let or_ = &mut odd[(y + 1) * od_w..(y + 2) * od_w];
        // padded row is [0, src[0..w], 0, 0]; padded col i holds src[i-1]
        for (j, er_j) in er.iter_mut().enumerate() {
            let i = 2 * j; // padded index
            if i >= 1 && i <= w {
                *er_j = src[i - 1];
            }
        }
        for (j, or_j) in or_.iter_mut().enumerate() {
            let i = 2 * j + 1;
            if i >= 1 && i <= w {
                *or_j = src[i - 1];
            }
        }
    }
    Deinterleaved { even, odd, ev_w, od_w }
}

/// Sixteen taps of a 4x4 stride-2 kernel against deinterleaved rows.
/// Tap (ky,kx) reads parity(kx) row ky at offset ox + kx/2.
#[inline]
fn conv4_row<E: Element>(
    yrow: &mut [E],
    d: &Deinterleaved<E>,
    base_row: usize,
    wt: &[E],
    accumulate: bool,
) {
    let n = yrow.len();
    let ev = |r: usize| &d.even[(base_row + r) * d.ev_w..(base_row + r + 1) * d.ev_w];
    let od = |r: usize| &d.odd[(base_row + r) * d.od_w..(base_row + r + 1) * d.od_w];
    let (e0, e1, e2, e3) = (ev(0), ev(1), ev(2), ev(3));
    let (o0, o1, o2, o3) = (od(0), od(1), od(2), od(3));
    for j in 0..n {
        let acc = wt[0] * e0[j]
            + wt[1] * o0[j]
            + wt[2] * e0[j + 1]
            + wt[3] * o0[j + 1]
            + wt[4] * e1[j]
            + wt[5] * o1[j]
            + wt[6] * e1[j + 1]
            + wt[7] * o1[j + 1]
            + wt[8] * e2[j]
            + wt[9] * o2[j]
            + wt[10] * e2[j + 1]
            + wt[11] * o2[j + 1]
            + wt[12] * e3[j]
            + wt[13] * o3[j]
            + wt[14] * e3[j + 1]
            + wt[15] * o3[j + 1];
        if accumulate {
            yrow[j] += acc;
        } else {
            yrow[j] = acc;
        }
    }
}

fn conv4s2_forward<E: Element>(x: &Tensor<E>, w: &Tensor<E>, b: &Tensor<E>, y: &mut Tensor<E>) {
    let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let cout = w.dim(0);
    let (hout, wout) = (y.dim(2), y.dim(3));
    for ni in 0..n {
        for co in 0..cout {
            y.plane_mut(ni, co).fill(b.data()[co]);
        }
        for ci in 0..cin {
            let d = deinterleave4s2(x.plane(ni, ci), h, wd);
            for co in 0..cout {
                let wt = &w.data()[(co * cin + ci) * 16..(co * cin + ci) * 16 + 16];
                let yp = y.plane_mut(ni, co);
                for oy in 0..hout {
                    conv4_row(&mut yp[oy * wout..(oy + 1) * wout], &d, 2 * oy, wt, true);
                }
            }
        }
    }
}

// ---- backward ----------------------------------------------------------

/// Gradients of conv2d with respect to input, weight and bias.
pub fn conv2d_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    gy: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let bias = Tensor::zeros(&[w.dim(0)]);
    let (n, _cin, h, wd, cout, _k, hout, wout) = check_args(x, w, &bias, stride, pad)?;
    if gy.shape() != [n, cout, hout, wout] {
        return Err(Error::Shape(format!(
            "conv2d_backward upstream {:?}, want {:?}",
            gy.shape(),
            [n, cout, hout, wout]
        )));
    }
    let mut gb = Tensor::zeros(&[cout]);
    for ni in 0..n {
        for co in 0..cout {
            let mut s = E::ZERO;
            for &g in gy.plane(ni, co) {
                s += g;
            }
            gb.data_mut()[co] += s;
        }
    }
    let gx = conv2d_backward_input(w, gy, h, wd, stride, pad)?;
    let gw = conv2d_backward_weight(x, w.shape(), gy, stride, pad)?;
    Ok((gx, gw, gb))
}

/// Input gradient only; used when the downstream parameters are frozen
/// (e.g. pushing generator gradients through the discriminator).
pub fn conv2d_backward_input<E: Element>(
    w: &Tensor<E>,
    gy: &Tensor<E>,
    h: usize,
    wd: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let (n, cout) = (gy.dim(0), gy.dim(1));
    let (cin, k) = (w.dim(1), w.dim(2));
    let (hout, wout) = (gy.dim(2), gy.dim(3));
    let mut gx = Tensor::zeros(&[n, cin, h, wd]);
    if k == 3 && stride == 1 && pad == 1 {
        // full correlation with the flipped kernel is itself a 3x3 stencil
        let mut padded = Vec::new();
        let pw = wd + 2;
        for ni in 0..n {
            for co in 0..cout {
                pad1(gy.plane(ni, co), h, wd, &mut padded);
                for ci in 0..cin {
                    let wt = &w.data()[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
                    let flipped = [wt[8], wt[7], wt[6], wt[5], wt[4], wt[3], wt[2], wt[1], wt[0]];
                    let gp = gx.plane_mut(ni, ci);
                    for oy in 0..h {
                        let r0 = &padded[oy * pw..];
                        let r1 = &padded[(oy + 1) * pw..];
                        let r2 = &padded[(oy + 2) * pw..];
                        stencil3_row(&mut gp[oy * wd..(oy + 1) * wd], r0, r1, r2, &flipped);
                    }
                }
            }
        }
        return Ok(gx);
    }
    if k == 4 && stride == 2 && pad == 1 {
        // scatter into deinterleaved scratch, then re-interleave
        let (ph, pw) = (h + 3, wd + 3);
        let ev_w = pw.div_ceil(2);
        let od_w = pw / 2;
        let mut even = vec![E::ZERO; ph * ev_w];
        let mut odd = vec![E::ZERO; ph * od_w];
        for ni in 0..n {
            for ci in 0..cin {
                even.fill(E::ZERO);
                odd.fill(E::ZERO);
                for co in 0..cout {
                    let wt = &w.data()[(co * cin + ci) * 16..(co * cin + ci) * 16 + 16];
                    let gyp = gy.plane(ni, co);
                    for oy in 0..hout {
                        let gyrow = &gyp[oy * wout..(oy + 1) * wout];
                        for ky in 0..4 {
                            let er = &mut even[(2 * oy + ky) * ev_w..(2 * oy + ky + 1) * ev_w];
                            let w0 = wt[ky * 4];
                            let w2 = wt[ky * 4 + 2];
                            for (j, &g) in gyrow.iter().enumerate() {
                                er[j] += w0 * g;
                                er[j + 1] += w2 * g;
                            }
                            let or_ = &mut odd[(2 * oy + ky) * od_w..(2 * oy + ky + 1) * od_w];
                            let w1 = wt[ky * 4 + 1];
                            let w3 = wt[ky * 4 + 3];
                            for (j, &g) in gyrow.iter().enumerate() {
                                or_[j] += w1 * g;
                                or_[j + 1] += w3 * g;
                            }
                        }
                    }
                }
                // padded col i = source col i-1; parity of i picks the buffer
                let gp = gx.plane_mut(ni, ci);
                for y in 0..h {
                    let er = &even[(y + 1) * ev_w..(y + 2) * ev_w];
                    let or_ = &odd[(y + 1) * od_w..(y + 2) * od_w];
                    let dst = &mut gp[y * wd..(y + 1) * wd];
                    for (i, d) in dst.iter_mut().enumerate() {
                        let pi = i + 1;
                        *d = if pi % 2 == 0 { er[pi / 2] } else { or_[pi / 2] };
                    }
                }
            }
        }
        return Ok(gx);
    }
    for ni in 0..n {
        for ci in 0..cin {
            let off = gx.plane_offset(ni, ci);
            for co in 0..cout {
                let gyplane = gy.plane(ni, co);
                let wbase = (co * cin + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w.data()[wbase + ky * k + kx];
                        scatter_rows(
                            &mut gx.data_mut()[off..off + h * wd],
                            gyplane,
                            wv,
                            h,
                            wd,
                            hout,
                            wout,
                            stride,
                            pad,
                            ky,
                            kx,
                        );
                    }
                }
            }
        }
    }
    Ok(gx)
}

fn conv2d_backward_weight<E: Element>(
    x: &Tensor<E>,
    wshape: &[usize],
    gy: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, k) = (wshape[0], wshape[2]);
    let (hout, wout) = (gy.dim(2), gy.dim(3));
    let mut gw = Tensor::zeros(wshape);
    if k == 3 && stride == 1 && pad == 1 {
        let mut padded = Vec::new();
        let pw = wd + 2;
        for ni in 0..n {
            for ci in 0..cin {
                pad1(x.plane(ni, ci), h, wd, &mut padded);
                for co in 0..cout {
                    let gyp = gy.plane(ni, co);
                    let mut acc = [E::ZERO; 9];
                    for oy in 0..h {
                        let gyrow = &gyp[oy * wd..(oy + 1) * wd];
                        let r0 = &padded[oy * pw..oy * pw + wd + 2];
                        let r1 = &padded[(oy + 1) * pw..(oy + 1) * pw + wd + 2];
                        let r2 = &padded[(oy + 2) * pw..(oy + 2) * pw + wd + 2];
                        let mut a = [E::ZERO; 9];
                        for (j, &g) in gyrow.iter().enumerate() {
                            a[0] += g * r0[j];
                            a[1] += g * r0[j + 1];
                            a[2] += g * r0[j + 2];
                            a[3] += g * r1[j];
                            a[4] += g * r1[j + 1];
                            a[5] += g * r1[j + 2];
                            a[6] += g * r2[j];
                            a[7] += g * r2[j + 1];
                            a[8] += g * r2[j + 2];
                        }
                        for t in 0..9 {
                            acc[t] += a[t];
                        }
                    }
                    let base = (co * cin + ci) * 9;
                    for t in 0..9 {
                        gw.data_mut()[base + t] += acc[t];
                    }
                }
            }
        }
        return Ok(gw);
    }
    if k == 4 && stride == 2 && pad == 1 {
        for ni in 0..n {
            for ci in 0..cin {
                let d = deinterleave4s2(x.plane(ni, ci), h, wd);
                for co in 0..cout {
                    let gyp = gy.plane(ni, co);
                    let mut acc = [E::ZERO; 16];
                    for oy in 0..hout {
                        let gyrow = &gyp[oy * wout..(oy + 1) * wout];
                        for ky in 0..4 {
                            let er = &d.even[(2 * oy + ky) * d.ev_w..(2 * oy + ky + 1) * d.ev_w];
                            let or_ = &d.odd[(2 * oy + ky) * d.od_w..(2 * oy + ky + 1) * d.od_w];
                            let mut a = [E::ZERO; 4];
                            for (j, &g) in gyrow.iter().enumerate() {
                                a[0] += g * er[j];
                                a[1] += g * or_[j];
                                a[2] += g * er[j + 1];
                                a[3] += g * or_[j + 1];
                            }
                            for t in 0..4 {
                                acc[ky * 4 + t] += a[t];
                            }
                        }
                    }
                    let base = (co * cin + ci) * 16;
                    for t in 0..16 {
                        gw.data_mut()[base + t] += acc[t];
                    }
                }
            }
        }
        return Ok(gw);
    }
    for ni in 0..n {
        for co in 0..cout {
            let gyplane = gy.plane(ni, co);
            for ci in 0..cin {
                let xplane = x.plane(ni, ci);
                let wbase = (co * cin + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let acc = tap_dot(gyplane, xplane, h, wd, hout, wout, stride, pad, ky, kx);
                        gw.data_mut()[wbase + ky * k + kx] += acc;
                    }
                }
            }
        }
    }
    Ok(gw)
}

/// sum over valid sites of gy[oy,ox] * x[oy*s-p+ky, ox*s-p+kx]
#[inline]
fn tap_dot<E: Element>(
    gyplane: &[E],
    xplane: &[E],
    h: usize,
    w: usize,
    hout: usize,
    wout: usize,
    stride: usize,
    pad: usize,
    ky: usize,
    kx: usize,
) -> E {
    let oy_lo = pad.saturating_sub(ky).div_ceil(stride).min(hout);
    let oy_hi = if h + pad > ky { ((h + pad - ky - 1) / stride + 1).min(hout) } else { 0 };
    let ox_lo = pad.saturating_sub(kx).div_ceil(stride).min(wout);
    let ox_hi = if w + pad > kx { ((w + pad - kx - 1) / stride + 1).min(wout) } else { 0 };
    let mut acc = E::ZERO;
    if ox_hi <= ox_lo {
        return acc;
    }
    let len = ox_hi - ox_lo;
    for oy in oy_lo..oy_hi {
        let iy = oy * stride + ky - pad;
        let ix0 = ox_lo * stride + kx - pad;
        let gyrow = &gyplane[oy * wout + ox_lo..oy * wout + ox_hi];
        if stride == 1 {
            let xrow = &xplane[iy * w + ix0..iy * w + ix0 + len];
            for (&g, &xi) in gyrow.iter().zip(xrow.iter()) {
                acc += g * xi;
            }
        } else {
            let xrow = &xplane[iy * w + ix0..];
            for (j, &g) in gyrow.iter().enumerate() {
                acc += g * xrow[j * stride];
            }
        }
    }
    acc
}

/// gx[oy*s-p+ky, ox*s-p+kx] += wv * gy[oy,ox] over valid sites.
#[inline]
fn scatter_rows<E: Element>(
    gxplane: &mut [E],
    gyplane: &[E],
    wv: E,
    h: usize,
    w: usize,
    hout: usize,
    wout: usize,
    stride: usize,
    pad: usize,
    ky: usize,
    kx: usize,
) {
    let oy_lo = pad.saturating_sub(ky).div_ceil(stride).min(hout);
    let oy_hi = if h + pad > ky { ((h + pad - ky - 1) / stride + 1).min(hout) } else { 0 };
    let ox_lo = pad.saturating_sub(kx).div_ceil(stride).min(wout);
    let ox_hi = if w + pad > kx { ((w + pad - kx - 1) / stride + 1).min(wout) } else { 0 };
    if ox_hi <= ox_lo {
        return;
    }
    let len = ox_hi - ox_lo;
    for oy in oy_lo..oy_hi {
        let iy = oy * stride + ky - pad;
        let ix0 = ox_lo * stride + kx - pad;
        let gyrow = &gyplane[oy * wout + ox_lo..oy * wout + ox_hi];
        if stride == 1 {
            let gxrow = &mut gxplane[iy * w + ix0..iy * w + ix0 + len];
            for (go, &g) in gxrow.iter_mut().zip(gyrow.iter()) {
                *go += wv * g;
            }
        } else {
            let gxrow = &mut gxplane[iy * w + ix0..];
            for (j, &g) in gyrow.iter().enumerate() {
                gxrow[j * stride] += wv * g;
            }
        }
    }
}
