//! Slice-level forward and backward kernels used by the tape.
//!
//! Every reduction runs in a fixed sequential order so results are
//! bit-reproducible.

use rayon::prelude::*;

use super::Shape;
use crate::affine::AffineTransform;
use crate::scalar::Scalar;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Output spatial dims of a convolution, `floor((H + 2p - K)/s) + 1`.
pub fn direct_conv_shape(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<(usize, usize)> {
    let ph = h + 2 * pad;
    let pw = w + 2 * pad;
    if ph < k || pw < k || stride == 0 {
        return None;
    }
    Some(((ph - k) / stride + 1, (pw - k) / stride + 1))
}

// ---------------------------------------------------------------- conv2d

pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.cols();
    let pad = g.pad as isize;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride) as isize - pad + ky as isize;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride) as isize - pad + kx as isize;
                        *o = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.cols();
    let pad = g.pad as isize;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride) as isize - pad + ky as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride) as isize - pad + kx as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, n: usize, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let p = g.cols();
    let rows = g.rows();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut out = vec![T::zero(); n * out_len];
    // samples are independent, so the split does not change any result
    out.par_chunks_mut(out_len).enumerate().for_each_init(
        || if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * p] },
        |cols, (s, os)| {
            let xs = &x[s * in_len..(s + 1) * in_len];
            let b: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(g, xs, cols);
                cols
            };
            if let Some(bias) = bias {
                for (co, chunk) in os.chunks_mut(p).enumerate() {
                    chunk.fill(bias[co]);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            T::gemm(g.cout, rows, p, T::one(), w, rows, 1, b, p, 1, beta, os, p, 1);
        },
    );
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    n: usize,
    x: &[T],
    w: &[T],
    gout: &[T],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let p = g.cols();
    let rows = g.rows();
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut dx = need_dx.then(|| vec![T::zero(); n * in_len]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.cout * rows]);
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for s in 0..n {
            for (co, d) in db.iter_mut().enumerate() {
                let start = s * out_len + co * p;
                *d += gout[start..start + p].iter().copied().sum::<T>();
            }
        }
        db
    });
    let pointwise = g.is_pointwise();
    if let Some(dw) = dw.as_mut() {
        // accumulated in sample order
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); rows * p] };
        for s in 0..n {
            let go = &gout[s * out_len..(s + 1) * out_len];
            let xs = &x[s * in_len..(s + 1) * in_len];
            let b: &[T] = if pointwise {
                xs
            } else {
                im2col(g, xs, &mut cols);
                &cols
            };
            // dW += gout_s · colsᵀ
            T::gemm(g.cout, p, rows, T::one(), go, p, 1, b, 1, p, T::one(), dw, rows, 1);
        }
    }
    if let Some(dx) = dx.as_mut() {
        dx.par_chunks_mut(in_len).enumerate().for_each_init(
            || if pointwise { Vec::new() } else { vec![T::zero(); rows * p] },
            |dcols, (s, dxs)| {
                let go = &gout[s * out_len..(s + 1) * out_len];
                if pointwise {
                    T::gemm(rows, g.cout, p, T::one(), w, 1, rows, go, p, 1, T::zero(), dxs, p, 1);
                } else {
                    T::gemm(rows, g.cout, p, T::one(), w, 1, rows, go, p, 1, T::zero(), dcols, p, 1);
                    col2im(g, dcols, dxs);
                }
            },
        );
    }
    ConvGrads { dx, dw, db }
}

// ---------------------------------------------------------------- sampling plans

/// Four bilinear taps per output pixel; unused taps have index `usize::MAX`.
#[derive(Clone, Debug)]
pub(crate) struct SamplePlan<T> {
    pub taps: Vec<[(usize, T); 4]>,
    pub valid: Vec<bool>,
}

const NO_TAP: usize = usize::MAX;

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

/// Source pixel coordinate for output pixel `(x, y)`.
///
/// Normalized coordinates follow the align-corners-false convention:
/// `u = (2i + 1)/W - 1`, so pixel centres sit at odd multiples of `1/W`.
/// The source position is `A·[u, v, 1]ᵀ`, mapped back with
/// `i = ((u + 1)·W - 1)/2`.
pub(crate) fn affine_source(a: &AffineTransform, x: usize, y: usize, wo: usize, ho: usize, wi: usize, hi: usize) -> (f64, f64) {
    let u = (2 * x + 1) as f64 / wo as f64 - 1.0;
    let v = (2 * y + 1) as f64 / ho as f64 - 1.0;
    let m = a.matrix();
    let su = m[0][0] * u + m[0][1] * v + m[0][2];
    let sv = m[1][0] * u + m[1][1] * v + m[1][2];
    (snap(((su + 1.0) * wi as f64 - 1.0) / 2.0), snap(((sv + 1.0) * hi as f64 - 1.0) / 2.0))
}

pub(crate) fn affine_plan<T: Scalar>(a: &AffineTransform, h: usize, w: usize, border: bool) -> SamplePlan<T> {
    let mut taps = Vec::with_capacity(h * w);
    let mut valid = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = affine_source(a, x, y, w, h, w, h);
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let corners = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ];
            let mut t = [(NO_TAP, T::zero()); 4];
            let mut ok = true;
            for (slot, &(cx, cy, wt)) in t.iter_mut().zip(&corners) {
                if wt == 0.0 {
                    continue;
                }
                let inside = cx >= 0.0 && cy >= 0.0 && cx <= (w - 1) as f64 && cy <= (h - 1) as f64;
                if !inside {
                    ok = false;
                    if !border {
                        continue;
                    }
                }
                let ix = cx.clamp(0.0, (w - 1) as f64) as usize;
                let iy = cy.clamp(0.0, (h - 1) as f64) as usize;
                *slot = (iy * w + ix, T::c(wt));
            }
            taps.push(t);
            valid.push(ok);
        }
    }
    SamplePlan { taps, valid }
}

/// Align-corners-false bilinear resize plan, edge-clamped.
///
/// Source coordinate: `s = (d + 0.5)·in/out - 0.5`, clamped at 0.
pub(crate) fn resize_plan<T: Scalar>(hi: usize, wi: usize, ho: usize, wo: usize) -> SamplePlan<T> {
    let axis = |d: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let f = if i1 == i0 { 0.0 } else { s - i0 as f64 };
        (i0, i1, f)
    };
    let mut taps = Vec::with_capacity(ho * wo);
    for y in 0..ho {
        let (y0, y1, fy) = axis(y, hi, ho);
        for x in 0..wo {
            let (x0, x1, fx) = axis(x, wi, wo);
            let mut t = [(NO_TAP, T::zero()); 4];
            let corners = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x1, y0, fx * (1.0 - fy)),
                (x0, y1, (1.0 - fx) * fy),
                (x1, y1, fx * fy),
            ];
            for (slot, &(cx, cy, wt)) in t.iter_mut().zip(&corners) {
                if wt != 0.0 {
                    *slot = (cy * wi + cx, T::c(wt));
                }
            }
            taps.push(t);
        }
    }
    SamplePlan { valid: vec![true; ho * wo], taps }
}

pub(crate) fn apply_plan<T: Scalar>(plan: &SamplePlan<T>, src: &[T], dst: &mut [T]) {
    for (o, taps) in dst.iter_mut().zip(&plan.taps) {
        let mut acc = T::zero();
        for &(i, wt) in taps {
            if i != NO_TAP {
                acc += wt * src[i];
            }
        }
        *o = acc;
    }
}

pub(crate) fn apply_plan_transpose<T: Scalar>(plan: &SamplePlan<T>, gout: &[T], dsrc: &mut [T]) {
    for (&g, taps) in gout.iter().zip(&plan.taps) {
        for &(i, wt) in taps {
            if i != NO_TAP {
                dsrc[i] += wt * g;
            }
        }
    }
}

// ---------------------------------------------------------------- gaussian filter

pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable depthwise filter with "valid" extent on every plane.
pub(crate) fn filter_valid<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, k: &[T]) -> Vec<T> {
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![T::zero(); h * wo];
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xo in 0..wo {
                let mut acc = T::zero();
                for (j, &kv) in k.iter().enumerate() {
                    acc += kv * src[y * w + xo + j];
                }
                tmp[y * wo + xo] = acc;
            }
        }
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for yo in 0..ho {
            for xo in 0..wo {
                let mut acc = T::zero();
                for (j, &kv) in k.iter().enumerate() {
                    acc += kv * tmp[(yo + j) * wo + xo];
                }
                dst[yo * wo + xo] = acc;
            }
        }
    }
    out
}

pub(crate) fn filter_valid_backward<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize, k: &[T]) -> Vec<T> {
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![T::zero(); h * wo];
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        tmp.fill(T::zero());
        let gp = &g[p * ho * wo..(p + 1) * ho * wo];
        for yo in 0..ho {
            for xo in 0..wo {
                let gv = gp[yo * wo + xo];
                for (j, &kv) in k.iter().enumerate() {
                    tmp[(yo + j) * wo + xo] += kv * gv;
                }
            }
        }
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xo in 0..wo {
                let tv = tmp[y * wo + xo];
                for (j, &kv) in k.iter().enumerate() {
                    dst[y * w + xo + j] += kv * tv;
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------- layout ops

pub(crate) fn pixel_shuffle<T: Scalar>(x: &[T], s: Shape, r: usize, inverse: bool) -> Vec<T> {
    // forward: (C·r², H, W) -> (C, rH, rW); inverse maps gradients back.
    let co = s.c / (r * r);
    let (ho, wo) = (s.h * r, s.w * r);
    let mut out = vec![T::zero(); x.len()];
    for n in 0..s.n {
        for c in 0..co {
            for i in 0..r {
                for j in 0..r {
                    let ci = c * r * r + i * r + j;
                    for h in 0..s.h {
                        for w in 0..s.w {
                            let src = ((n * s.c + ci) * s.h + h) * s.w + w;
                            let dst = ((n * co + c) * ho + h * r + i) * wo + w * r + j;
                            if inverse {
                                out[src] = x[dst];
                            } else {
                                out[dst] = x[src];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------- stereo correlation

/// `out[n,d,y,x] = mean_c L[n,c,y,x]·R[n,c,y,x-d]`, zero where `x < d`.
pub(crate) fn correlation<T: Scalar>(l: &[T], r: &[T], s: Shape, max_shift: usize) -> Vec<T> {
    let d_count = max_shift + 1;
    let plane = s.plane();
    let inv_c = T::one() / T::c(s.c as f64);
    let mut out = vec![T::zero(); s.n * d_count * plane];
    for n in 0..s.n {
        for d in 0..d_count {
            let dst = &mut out[(n * d_count + d) * plane..(n * d_count + d + 1) * plane];
            for c in 0..s.c {
                let base = (n * s.c + c) * plane;
                for y in 0..s.h {
                    for x in d..s.w {
                        dst[y * s.w + x] += l[base + y * s.w + x] * r[base + y * s.w + x - d];
                    }
                }
            }
            for v in dst.iter_mut() {
                *v *= inv_c;
            }
        }
    }
    out
}

pub(crate) fn correlation_backward<T: Scalar>(l: &[T], r: &[T], s: Shape, max_shift: usize, g: &[T]) -> (Vec<T>, Vec<T>) {
    let d_count = max_shift + 1;
    let plane = s.plane();
    let inv_c = T::one() / T::c(s.c as f64);
    let mut dl = vec![T::zero(); l.len()];
    let mut dr = vec![T::zero(); r.len()];
    for n in 0..s.n {
        for d in 0..d_count {
            let gp = &g[(n * d_count + d) * plane..(n * d_count + d + 1) * plane];
            for c in 0..s.c {
                let base = (n * s.c + c) * plane;
                for y in 0..s.h {
                    for x in d..s.w {
                        let gv = gp[y * s.w + x] * inv_c;
                        dl[base + y * s.w + x] += gv * r[base + y * s.w + x - d];
                        dr[base + y * s.w + x - d] += gv * l[base + y * s.w + x];
                    }
                }
            }
        }
    }
    (dl, dr)
}

// ---------------------------------------------------------------- softmax / cross-entropy

pub(crate) fn softmax_channels<T: Scalar>(x: &[T], s: Shape) -> Vec<T> {
    let plane = s.plane();
    let mut out = vec![T::zero(); x.len()];
    for n in 0..s.n {
        for p in 0..plane {
            let idx = |c: usize| (n * s.c + c) * plane + p;
            let m = (0..s.c).map(|c| x[idx(c)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for c in 0..s.c {
                let e = (x[idx(c)] - m).exp();
                out[idx(c)] = e;
                z += e;
            }
            for c in 0..s.c {
                out[idx(c)] /= z;
            }
        }
    }
    out
}

pub(crate) fn softmax_channels_backward<T: Scalar>(sm: &[T], g: &[T], s: Shape) -> Vec<T> {
    let plane = s.plane();
    let mut dx = vec![T::zero(); sm.len()];
    for n in 0..s.n {
        for p in 0..plane {
            let idx = |c: usize| (n * s.c + c) * plane + p;
            let dot: T = (0..s.c).map(|c| g[idx(c)] * sm[idx(c)]).sum();
            for c in 0..s.c {
                dx[idx(c)] = sm[idx(c)] * (g[idx(c)] - dot);
            }
        }
    }
    dx
}

/// Returns (mean loss, d loss / d logits) over non-ignored pixels.
pub(crate) fn cross_entropy<T: Scalar>(logits: &[T], s: Shape, labels: &[u32], ignore: u32) -> Option<(T, Vec<T>)> {
    let plane = s.plane();
    let count = labels.iter().filter(|&&l| l != ignore).count();
    if count == 0 {
        return None;
    }
    let inv = T::one() / T::c(count as f64);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    for n in 0..s.n {
        for p in 0..plane {
            let label = labels[n * plane + p];
            if label == ignore {
                continue;
            }
            let idx = |c: usize| (n * s.c + c) * plane + p;
            let m = (0..s.c).map(|c| logits[idx(c)]).fold(T::neg_infinity(), T::max);
            let z: T = (0..s.c).map(|c| (logits[idx(c)] - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - logits[idx(label as usize)];
            for c in 0..s.c {
                let p_c = (logits[idx(c)] - lse).exp();
                let onehot = if c == label as usize { T::one() } else { T::zero() };
                grad[idx(c)] = (p_c - onehot) * inv;
            }
        }
    }
    Some((total * inv, grad))
}
