//! Forward and backward numeric kernels used by the tape.
//!
//! Plain loops over contiguous buffers. Reductions run in a fixed order so
//! results are bit-reproducible.

use crate::tensor::{Real, Shape};

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub(crate) fn matmul_acc(a: &[Real], b: &[Real], c: &mut [Real], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`.
pub(crate) fn matmul_bt_acc(a: &[Real], b: &[Real], c: &mut [Real], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            let b_row = &b[kk * n..(kk + 1) * n];
            let dot: Real = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            c[i * k + kk] += dot;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn matmul_at_acc(a: &[Real], b: &[Real], c: &mut [Real], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[kk * n..(kk + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Geometry of a "same"-padded convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize) -> Self {
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        ConvGeom { cin, h, w, k, stride, pad, ho, wo }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

/// Unfolds one sample (cin×h×w) into a (cin·k·k)×(ho·wo) patch matrix.
pub(crate) fn im2col(x: &[Real], g: &ConvGeom, cols: &mut [Real]) {
    let p = g.ho * g.wo;
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.h
                            && (ix as usize) < g.w
                        {
                            x[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto one sample.
pub(crate) fn col2im_acc(cols: &[Real], g: &ConvGeom, dx: &mut [Real]) {
    let p = g.ho * g.wo;
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        dx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &[Real],
    xs: Shape,
    w: &[Real],
    cout: usize,
    bias: Option<&[Real]>,
    g: &ConvGeom,
) -> Vec<Real> {
    let p = g.ho * g.wo;
    let kdim = g.col_rows();
    let in_per = xs.c * xs.plane();
    let mut out = vec![0.0; xs.n * cout * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kdim * p] };
    for n in 0..xs.n {
        let xn = &x[n * in_per..(n + 1) * in_per];
        let on = &mut out[n * cout * p..(n + 1) * cout * p];
        if let Some(b) = bias {
            for (o, bv) in b.iter().enumerate() {
                on[o * p..(o + 1) * p].fill(*bv);
            }
        }
        if g.is_pointwise() {
            matmul_acc(w, xn, on, cout, kdim, p);
        } else {
            im2col(xn, g, &mut cols);
            matmul_acc(w, &cols, on, cout, kdim, p);
        }
    }
    out
}

/// Returns (dx, dw, db) for the requested operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[Real],
    xs: Shape,
    w: &[Real],
    cout: usize,
    g: &ConvGeom,
    dy: &[Real],
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<Real>>, Option<Vec<Real>>, Option<Vec<Real>>) {
    let p = g.ho * g.wo;
    let kdim = g.col_rows();
    let in_per = xs.c * xs.plane();
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    let mut db = want_db.then(|| vec![0.0; cout]);
    let mut cols = vec![0.0; kdim * p];
    for n in 0..xs.n {
        let dyn_ = &dy[n * cout * p..(n + 1) * cout * p];
        if let Some(db) = db.as_mut() {
            for o in 0..cout {
                db[o] += dyn_[o * p..(o + 1) * p].iter().sum::<Real>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xn = &x[n * in_per..(n + 1) * in_per];
            if g.is_pointwise() {
                matmul_bt_acc(dyn_, xn, dw, cout, p, kdim);
            } else {
                im2col(xn, g, &mut cols);
                matmul_bt_acc(dyn_, &cols, dw, cout, p, kdim);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_per..(n + 1) * in_per];
            if g.is_pointwise() {
                matmul_at_acc(w, dyn_, dxn, cout, kdim, p);
            } else {
                cols.fill(0.0);
                matmul_at_acc(w, dyn_, &mut cols, cout, kdim, p);
                col2im_acc(&cols, g, dxn);
            }
        }
    }
    (dx, dw, db)
}

/// Clipped window bounds `[lo, hi)` of a centered odd window.
#[inline]
fn window(center: usize, half: usize, len: usize) -> (usize, usize) {
    (center.saturating_sub(half), (center + half + 1).min(len))
}

/// Stride-1 same-size max pooling; returns values and the flat argmax index
/// (first maximum in row-major window order) of every output pixel.
pub(crate) fn max_pool_forward(x: &[Real], s: Shape, k: usize) -> (Vec<Real>, Vec<u32>) {
    let half = k / 2;
    let plane = s.plane();
    let mut out = vec![0.0; x.len()];
    let mut arg = vec![0u32; x.len()];
    for base in (0..x.len()).step_by(plane.max(1)) {
        let xp = &x[base..base + plane];
        for i in 0..s.h {
            let (r0, r1) = window(i, half, s.h);
            for j in 0..s.w {
                let (c0, c1) = window(j, half, s.w);
                let mut best = Real::NEG_INFINITY;
                let mut best_at = r0 * s.w + c0;
                for r in r0..r1 {
                    for c in c0..c1 {
                        let v = xp[r * s.w + c];
                        if v > best {
                            best = v;
                            best_at = r * s.w + c;
                        }
                    }
                }
                out[base + i * s.w + j] = best;
                arg[base + i * s.w + j] = (base + best_at) as u32;
            }
        }
    }
    (out, arg)
}

/// Stride-1 same-size average pooling that divides by the number of
/// in-bounds elements of each window.
pub(crate) fn avg_pool_forward(x: &[Real], s: Shape, k: usize) -> Vec<Real> {
    let half = k / 2;
    let plane = s.plane();
    let mut out = vec![0.0; x.len()];
    for base in (0..x.len()).step_by(plane.max(1)) {
        let xp = &x[base..base + plane];
        for i in 0..s.h {
            let (r0, r1) = window(i, half, s.h);
            for j in 0..s.w {
                let (c0, c1) = window(j, half, s.w);
                let mut acc = 0.0;
                for r in r0..r1 {
                    acc += xp[r * s.w + c0..r * s.w + c1].iter().sum::<Real>();
                }
                out[base + i * s.w + j] = acc / ((r1 - r0) * (c1 - c0)) as Real;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(dy: &[Real], s: Shape, k: usize) -> Vec<Real> {
    let half = k / 2;
    let plane = s.plane();
    let mut dx = vec![0.0; dy.len()];
    for base in (0..dy.len()).step_by(plane.max(1)) {
        for i in 0..s.h {
            let (r0, r1) = window(i, half, s.h);
            for j in 0..s.w {
                let (c0, c1) = window(j, half, s.w);
                let g = dy[base + i * s.w + j] / ((r1 - r0) * (c1 - c0)) as Real;
                if g == 0.0 {
                    continue;
                }
                for r in r0..r1 {
                    for v in &mut dx[base + r * s.w + c0..base + r * s.w + c1] {
                        *v += g;
                    }
                }
            }
        }
    }
    dx
}

/// Every element replaced by the mean of its row.
pub(crate) fn row_mean(x: &[Real], s: Shape) -> Vec<Real> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(s.w).zip(out.chunks_mut(s.w)) {
        let m = src.iter().sum::<Real>() / s.w as Real;
        dst.fill(m);
    }
    out
}

/// Every element replaced by the mean of its column.
pub(crate) fn col_mean(x: &[Real], s: Shape) -> Vec<Real> {
    let plane = s.plane();
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(plane).zip(out.chunks_mut(plane)) {
        for j in 0..s.w {
            let m = (0..s.h).map(|i| src[i * s.w + j]).sum::<Real>() / s.h as Real;
            for i in 0..s.h {
                dst[i * s.w + j] = m;
            }
        }
    }
    out
}
