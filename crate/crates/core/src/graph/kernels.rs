//! Slice-level forward/backward kernels for the NCHW operators.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{matmul, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        n: usize,
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Some(Self {
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    #[inline]
    fn src(&self, o: usize, kk: usize, limit: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - self.pad as isize;
        if i >= 0 && (i as usize) < limit {
            Some(i as usize)
        } else {
            None
        }
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.cin {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    match g.src(oy, ky, g.h) {
                        None => drow.iter_mut().for_each(|v| *v = T::zero()),
                        Some(iy) if g.stride == 1 => {
                            let (lo, hi, off) = unit_stride_span(g, kx);
                            drow[..lo].iter_mut().for_each(|v| *v = T::zero());
                            drow[hi..].iter_mut().for_each(|v| *v = T::zero());
                            if lo < hi {
                                let src = iy * g.w + lo + kx - off;
                                drow[lo..hi].copy_from_slice(&xc[src..src + hi - lo]);
                            }
                        }
                        Some(iy) => {
                            for (ox, d) in drow.iter_mut().enumerate() {
                                *d = match g.src(ox, kx, g.w) {
                                    Some(ix) => xc[iy * g.w + ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.cin {
        let xc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let Some(iy) = g.src(oy, ky, g.h) else {
                        continue;
                    };
                    if g.stride == 1 {
                        let (lo, hi, off) = unit_stride_span(g, kx);
                        if lo < hi {
                            let dst = iy * g.w + lo + kx - off;
                            let s = &src[oy * g.wo + lo..oy * g.wo + hi];
                            for (d, &v) in xc[dst..dst + hi - lo].iter_mut().zip(s) {
                                *d = *d + v;
                            }
                        }
                        continue;
                    }
                    for ox in 0..g.wo {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            xc[iy * g.w + ix] = xc[iy * g.w + ix] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Dense convolution. `w` is `(cout, cin, k, k)`, `b` is `(cout)`.
pub fn conv_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let plane = g.ho * g.wo;
    let kdim = g.cin * g.k * g.k;
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kdim * plane]
    };
    for n in 0..g.n {
        let xs = &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let os = &mut out[n * g.cout * plane..(n + 1) * g.cout * plane];
        if let Some(b) = b {
            for (co, bias) in b.iter().enumerate() {
                os[co * plane..(co + 1) * plane].iter_mut().for_each(|v| *v = *bias);
            }
        }
        let src: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        matmul(os, w, src, g.cout, kdim, plane, false, false, b.is_some());
    }
    out
}

/// Gradients of a dense convolution. Returns `(dx, dw, db)`; each is only
/// computed when requested.
pub fn conv_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.ho * g.wo;
    let kdim = g.cin * g.k * g.k;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut db = need_db.then(|| vec![T::zero(); g.cout]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { kdim * plane }];
    let mut dcols = vec![T::zero(); if need_dx && !g.is_pointwise() { kdim * plane } else { 0 }];
    for n in 0..g.n {
        let xs = &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let dys = &dy[n * g.cout * plane..(n + 1) * g.cout * plane];
        if let Some(db) = db.as_mut() {
            for (co, d) in db.iter_mut().enumerate() {
                *d = dys[co * plane..(co + 1) * plane]
                    .iter()
                    .fold(*d, |s, &v| s + v);
            }
        }
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            // dw (cout×kdim) += dy (cout×plane) · colsᵀ (plane×kdim)
            matmul(dw, dys, src, g.cout, plane, kdim, false, true, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
            if g.is_pointwise() {
                matmul(dxs, w, dys, kdim, g.cout, plane, true, false, false);
            } else {
                matmul(&mut dcols, w, dys, kdim, g.cout, plane, true, false, false);
                col2im(&dcols, g, dxs);
            }
        }
    }
    (dx, dw, db)
}

/// Output columns `lo..hi` whose input column `ox + kx - pad` is inside the
/// image, for unit stride. Returns `(lo, hi, pad)`; empty spans have `lo == hi`.
fn unit_stride_span(g: &ConvGeom, kx: usize) -> (usize, usize, usize) {
    let lo = g.pad.saturating_sub(kx).min(g.wo);
    let hi = (g.w + g.pad).saturating_sub(kx).min(g.wo).max(lo);
    (lo, hi, g.pad)
}

/// Depth-wise convolution: `w` is `(c, 1, k, k)`, `b` is `(c)`.
pub fn dwconv_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let plane = g.ho * g.wo;
    let kk = g.k * g.k;
    let mut out = vec![T::zero(); g.n * g.cin * plane];
    for n in 0..g.n {
        for c in 0..g.cin {
            let xc = &x[(n * g.cin + c) * g.h * g.w..(n * g.cin + c + 1) * g.h * g.w];
            let wc = &w[c * kk..(c + 1) * kk];
            let oc = &mut out[(n * g.cin + c) * plane..(n * g.cin + c + 1) * plane];
            let bias = b.map_or(T::zero(), |b| b[c]);
            if g.stride == 1 {
                oc.iter_mut().for_each(|v| *v = bias);
                for oy in 0..g.ho {
                    let orow = &mut oc[oy * g.wo..(oy + 1) * g.wo];
                    for ky in 0..g.k {
                        let Some(iy) = g.src(oy, ky, g.h) else {
                            continue;
                        };
                        let xrow = &xc[iy * g.w..(iy + 1) * g.w];
                        for kx in 0..g.k {
                            let (lo, hi, off) = unit_stride_span(g, kx);
                            if lo == hi {
                                continue;
                            }
                            let wv = wc[ky * g.k + kx];
                            for (o, &xv) in orow[lo..hi].iter_mut().zip(&xrow[lo + kx - off..hi + kx - off]) {
                                *o = *o + wv * xv;
                            }
                        }
                    }
                }
                continue;
            }
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = bias;
                    for ky in 0..g.k {
                        let Some(iy) = g.src(oy, ky, g.h) else {
                            continue;
                        };
                        for kx in 0..g.k {
                            if let Some(ix) = g.src(ox, kx, g.w) {
                                acc = acc + xc[iy * g.w + ix] * wc[ky * g.k + kx];
                            }
                        }
                    }
                    oc[oy * g.wo + ox] = acc;
                }
            }
        }
    }
    out
}

pub fn dwconv_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.ho * g.wo;
    let kk = g.k * g.k;
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut db = need_db.then(|| vec![T::zero(); g.cin]);
    for n in 0..g.n {
        for c in 0..g.cin {
            let base = (n * g.cin + c) * g.h * g.w;
            let xc = &x[base..base + g.h * g.w];
            let wc = &w[c * kk..(c + 1) * kk];
            let dyc = &dy[(n * g.cin + c) * plane..(n * g.cin + c + 1) * plane];
            if let Some(db) = db.as_mut() {
                db[c] = dyc.iter().fold(db[c], |s, &v| s + v);
            }
            if g.stride == 1 {
                for oy in 0..g.ho {
                    let dyrow = &dyc[oy * g.wo..(oy + 1) * g.wo];
                    for ky in 0..g.k {
                        let Some(iy) = g.src(oy, ky, g.h) else {
                            continue;
                        };
                        let row = base + iy * g.w;
                        for kx in 0..g.k {
                            let (lo, hi, off) = unit_stride_span(g, kx);
                            if lo == hi {
                                continue;
                            }
                            let (a, z) = (row + lo + kx - off, row + hi + kx - off);
                            let d = &dyrow[lo..hi];
                            if let Some(dw) = dw.as_mut() {
                                let i = c * kk + ky * g.k + kx;
                                dw[i] = d.iter().zip(&x[a..z]).fold(dw[i], |s, (&dv, &xv)| s + dv * xv);
                            }
                            if let Some(dx) = dx.as_mut() {
                                let wv = wc[ky * g.k + kx];
                                for (o, &dv) in dx[a..z].iter_mut().zip(d) {
                                    *o = *o + wv * dv;
                                }
                            }
                        }
                    }
                }
                continue;
            }
            for oy in 0..g.ho {
                for ky in 0..g.k {
                    let Some(iy) = g.src(oy, ky, g.h) else {
                        continue;
                    };
                    for ox in 0..g.wo {
                        let d = dyc[oy * g.wo + ox];
                        for kx in 0..g.k {
                            if let Some(ix) = g.src(ox, kx, g.w) {
                                if let Some(dw) = dw.as_mut() {
                                    let i = c * kk + ky * g.k + kx;
                                    dw[i] = dw[i] + d * xc[iy * g.w + ix];
                                }
                                if let Some(dx) = dx.as_mut() {
                                    let i = base + iy * g.w + ix;
                                    dx[i] = dx[i] + d * wc[ky * g.k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Non-overlapping `k×k` average pooling over `planes` planes of `h×w`.
pub fn avgpool_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (ho, wo) = (h / k, w / k);
    let inv = T::one() / T::from_f64((k * k) as f64);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for dy in 0..k {
                    let row = &xp[(oy * k + dy) * w + ox * k..(oy * k + dy) * w + ox * k + k];
                    acc = row.iter().fold(acc, |s, &v| s + v);
                }
                op[oy * wo + ox] = acc * inv;
            }
        }
    }
    out
}

pub fn avgpool_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (ho, wo) = (h / k, w / k);
    let inv = T::one() / T::from_f64((k * k) as f64);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            for x in 0..w {
                dx[p * h * w + y * w + x] = dy[p * ho * wo + (y / k) * wo + x / k] * inv;
            }
        }
    }
    dx
}

/// Per-output-index source taps `(i0, i1, w0, w1)` for half-pixel-centred
/// bilinear resampling (`align_corners = false`).
fn bilinear_taps<T: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, T, T)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (num_traits::Float::floor(pos) as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let l = pos - i0 as f64;
            let l = if i1 == i0 { 0.0 } else { l };
            (i0, i1, T::from_f64(1.0 - l), T::from_f64(l))
        })
        .collect()
}

pub fn bilinear_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let ty = bilinear_taps::<T>(h, ho);
    let tx = bilinear_taps::<T>(w, wo);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let top = xp[y0 * w + x0] * wx0 + xp[y0 * w + x1] * wx1;
                let bot = xp[y1 * w + x0] * wx0 + xp[y1 * w + x1] * wx1;
                op[oy * wo + ox] = top * wy0 + bot * wy1;
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let ty = bilinear_taps::<T>(h, ho);
    let tx = bilinear_taps::<T>(w, wo);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dp = &mut dx[p * h * w..(p + 1) * h * w];
        let gp = &dy[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let g = gp[oy * wo + ox];
                dp[y0 * w + x0] = dp[y0 * w + x0] + g * wy0 * wx0;
                dp[y0 * w + x1] = dp[y0 * w + x1] + g * wy0 * wx1;
                dp[y1 * w + x0] = dp[y1 * w + x0] + g * wy1 * wx0;
                dp[y1 * w + x1] = dp[y1 * w + x1] + g * wy1 * wx1;
            }
        }
    }
    dx
}

/// Instance normalisation of each plane. Returns the normalised values and
/// the per-plane `1/sqrt(var + eps)`; planes that are exactly constant map to
/// zeros.
pub fn instance_norm_forward<T: Scalar>(x: &[T], planes: usize, len: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); planes];
    let inv_len = T::one() / T::from_f64(len as f64);
    for p in 0..planes {
        let xp = &x[p * len..(p + 1) * len];
        let first = xp[0];
        let mean = xp.iter().fold(T::zero(), |s, &v| s + v) * inv_len;
        let var = xp.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) * inv_len;
        let is = T::one() / (var + eps).sqrt();
        inv_std[p] = is;
        if xp.iter().all(|&v| v == first) {
            continue;
        }
        for (o, &v) in out[p * len..(p + 1) * len].iter_mut().zip(xp) {
            *o = (v - mean) * is;
        }
    }
    (out, inv_std)
}

/// `dx = inv_std · (dy − mean(dy) − x̂ · mean(dy · x̂))` per plane.
pub fn instance_norm_backward<T: Scalar>(y: &[T], inv_std: &[T], dy: &[T], len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    let inv_len = T::one() / T::from_f64(len as f64);
    for (p, &is) in inv_std.iter().enumerate() {
        let yp = &y[p * len..(p + 1) * len];
        let gp = &dy[p * len..(p + 1) * len];
        let mean_g = gp.iter().fold(T::zero(), |s, &v| s + v) * inv_len;
        let mean_gy = gp
            .iter()
            .zip(yp)
            .fold(T::zero(), |s, (&g, &v)| s + g * v)
            * inv_len;
        for ((d, &g), &v) in dx[p * len..(p + 1) * len].iter_mut().zip(gp).zip(yp) {
            *d = is * (g - mean_g - v * mean_gy);
        }
    }
    dx
}
