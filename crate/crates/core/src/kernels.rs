//! Raw dense numeric kernels behind the tensor ops.
//!
//! Every kernel is written as a gather over independent output regions
//! (rows, planes, or lanes) with a fixed sequential reduction order inside
//! each region. The `parallel` feature distributes regions across a rayon
//! pool; since no two tasks write the same output element and reductions
//! never change order, the parallel and sequential paths are bit-identical.
//!
//! The `*_seq` twins always run single-threaded and exist so benchmarks can
//! compare the two paths directly; the unsuffixed entry points dispatch to
//! rayon when the feature is on and the problem is large enough to amortize
//! the fork/join overhead.

use crate::Elem;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum multiply-add count before a kernel bothers with the rayon pool.
const PAR_THRESHOLD: usize = 1 << 15;

#[inline]
fn dot(a: &[Elem], b: &[Elem]) -> Elem {
    debug_assert_eq!(a.len(), b.len());
    // Four independent accumulators break the add dependency chain; the
    // summation order is still fixed, so results stay run-to-run identical.
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: Elem, x: &[Elem], y: &mut [Elem]) {
    debug_assert_eq!(x.len(), y.len());
    for i in 0..x.len() {
        y[i] += alpha * x[i];
    }
}

/// Run `f(region_index, region)` over consecutive `region_len` chunks of
/// `out`, in parallel when worthwhile. `work` is the total multiply-add
/// estimate used to decide whether rayon pays off.
#[inline]
fn run_regions<F>(out: &mut [Elem], region_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [Elem]) + Sync,
{
    debug_assert!(region_len > 0 && out.len() % region_len == 0);
    #[cfg(feature = "parallel")]
    {
        if out.len() / region_len > 1 && work >= PAR_THRESHOLD {
            out.par_chunks_mut(region_len)
                .enumerate()
                .for_each(|(i, chunk)| f(i, chunk));
            return;
        }
    }
    let _ = work;
    for (i, chunk) in out.chunks_mut(region_len).enumerate() {
        f(i, chunk);
    }
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

#[inline]
fn mm_row(a: &[Elem], b: &[Elem], i: usize, out_row: &mut [Elem], k: usize, n: usize) {
    out_row.fill(0.0);
    let a_row = &a[i * k..(i + 1) * k];
    for (p, &av) in a_row.iter().enumerate() {
        axpy(av, &b[p * n..(p + 1) * n], out_row);
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`, all row-major.
pub fn matmul(a: &[Elem], b: &[Elem], out: &mut [Elem], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    run_regions(out, n, m * k * n, |i, row| mm_row(a, b, i, row, k, n));
}

/// Sequential twin of [`matmul`].
pub fn matmul_seq(a: &[Elem], b: &[Elem], out: &mut [Elem], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        mm_row(a, b, i, &mut out[i * n..(i + 1) * n], k, n);
    }
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ` (`b` stored row-major with n rows).
pub fn matmul_nt(a: &[Elem], b: &[Elem], out: &mut [Elem], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    run_regions(out, n, m * k * n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    });
}

/// `out[m×n] = a[s×m]ᵀ · b[s×n]` (both stored row-major with s rows).
///
/// Each output element sums over `p = 0..s` in ascending order in both the
/// sequential and parallel paths.
pub fn matmul_tn(a: &[Elem], b: &[Elem], out: &mut [Elem], s: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), s * m);
    debug_assert_eq!(b.len(), s * n);
    debug_assert_eq!(out.len(), m * n);
    run_regions(out, n, s * m * n, |i, row| {
        row.fill(0.0);
        for p in 0..s {
            axpy(a[p * m + i], &b[p * n..(p + 1) * n], row);
        }
    });
}

// ---------------------------------------------------------------------------
// 2-D convolution (weight layout [cout, cin, k, k], NCHW activations)
// ---------------------------------------------------------------------------

/// Shape bundle for the convolution kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvShape {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    /// Output extent of a forward convolution.
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    /// Output extent of a transposed convolution.
    pub fn tconv_out_hw(&self) -> (usize, usize) {
        (
            (self.h - 1) * self.stride + self.k - 2 * self.pad,
            (self.w - 1) * self.stride + self.k - 2 * self.pad,
        )
    }
}

#[inline]
fn conv2d_plane(
    x: &[Elem],
    w: &[Elem],
    bias: Option<&[Elem]>,
    s: ConvShape,
    bi: usize,
    co: usize,
    out_plane: &mut [Elem],
) {
    let (ho, wo) = s.out_hw();
    let x_img = &x[bi * s.cin * s.h * s.w..(bi + 1) * s.cin * s.h * s.w];
    let b0 = bias.map_or(0.0, |b| b[co]);
    if s.k == 1 && s.stride == 1 && s.pad == 0 {
        // Pointwise path: a channel-space matmul, one axpy per input channel.
        out_plane.fill(b0);
        for ci in 0..s.cin {
            axpy(w[co * s.cin + ci], &x_img[ci * s.h * s.w..(ci + 1) * s.h * s.w], out_plane);
        }
        return;
    }
    let w_f = &w[co * s.cin * s.k * s.k..(co + 1) * s.cin * s.k * s.k];
    for oh in 0..ho {
        for ow in 0..wo {
            let mut acc = b0;
            for ci in 0..s.cin {
                let x_pl = &x_img[ci * s.h * s.w..(ci + 1) * s.h * s.w];
                let w_pl = &w_f[ci * s.k * s.k..(ci + 1) * s.k * s.k];
                for kh in 0..s.k {
                    let ih = (oh * s.stride + kh) as isize - s.pad as isize;
                    if ih < 0 || ih >= s.h as isize {
                        continue;
                    }
                    let x_row = &x_pl[ih as usize * s.w..(ih as usize + 1) * s.w];
                    let w_row = &w_pl[kh * s.k..(kh + 1) * s.k];
                    for kw in 0..s.k {
                        let iw = (ow * s.stride + kw) as isize - s.pad as isize;
                        if iw < 0 || iw >= s.w as isize {
                            continue;
                        }
                        acc += x_row[iw as usize] * w_row[kw];
                    }
                }
            }
            out_plane[oh * wo + ow] = acc;
        }
    }
}

/// Forward convolution. `x` is `[batch, cin, h, w]`, `w` is
/// `[cout, cin, k, k]`, `out` is `[batch, cout, ho, wo]`.
pub fn conv2d(x: &[Elem], w: &[Elem], bias: Option<&[Elem]>, s: ConvShape, out: &mut [Elem]) {
    let (ho, wo) = s.out_hw();
    debug_assert_eq!(out.len(), s.batch * s.cout * ho * wo);
    let work = s.batch * s.cout * ho * wo * s.cin * s.k * s.k;
    run_regions(out, ho * wo, work, |idx, plane| {
        conv2d_plane(x, w, bias, s, idx / s.cout, idx % s.cout, plane);
    });
}

/// Sequential twin of [`conv2d`].
pub fn conv2d_seq(x: &[Elem], w: &[Elem], bias: Option<&[Elem]>, s: ConvShape, out: &mut [Elem]) {
    let (ho, wo) = s.out_hw();
    for (idx, plane) in out.chunks_mut(ho * wo).enumerate() {
        conv2d_plane(x, w, bias, s, idx / s.cout, idx % s.cout, plane);
    }
}

/// Input gradient of [`conv2d`]: `dx[batch, cin, h, w]` from
/// `dy[batch, cout, ho, wo]`.
pub fn conv2d_grad_x(dy: &[Elem], w: &[Elem], s: ConvShape, dx: &mut [Elem]) {
    let (ho, wo) = s.out_hw();
    debug_assert_eq!(dx.len(), s.batch * s.cin * s.h * s.w);
    let work = dx.len() * s.cout * s.k * s.k;
    run_regions(dx, s.h * s.w, work, |idx, plane| {
        let (bi, ci) = (idx / s.cin, idx % s.cin);
        let dy_img = &dy[bi * s.cout * ho * wo..(bi + 1) * s.cout * ho * wo];
        if s.k == 1 && s.stride == 1 && s.pad == 0 {
            plane.fill(0.0);
            for co in 0..s.cout {
                axpy(w[co * s.cin + ci], &dy_img[co * ho * wo..(co + 1) * ho * wo], plane);
            }
            return;
        }
        for ih in 0..s.h {
            for iw in 0..s.w {
                let mut acc = 0.0;
                for kh in 0..s.k {
                    let oh_num = ih as isize + s.pad as isize - kh as isize;
                    if oh_num < 0 || oh_num % s.stride as isize != 0 {
                        continue;
                    }
                    let oh = oh_num as usize / s.stride;
                    if oh >= ho {
                        continue;
                    }
                    for kw in 0..s.k {
                        let ow_num = iw as isize + s.pad as isize - kw as isize;
                        if ow_num < 0 || ow_num % s.stride as isize != 0 {
                            continue;
                        }
                        let ow = ow_num as usize / s.stride;
                        if ow >= wo {
                            continue;
                        }
                        for co in 0..s.cout {
                            acc += dy_img[(co * ho + oh) * wo + ow]
                                * w[((co * s.cin + ci) * s.k + kh) * s.k + kw];
                        }
                    }
                }
                plane[ih * s.w + iw] = acc;
            }
        }
    });
}

/// Weight gradient of [`conv2d`]: `dw[cout, cin, k, k]`.
pub fn conv2d_grad_w(x: &[Elem], dy: &[Elem], s: ConvShape, dw: &mut [Elem]) {
    let (ho, wo) = s.out_hw();
    debug_assert_eq!(dw.len(), s.cout * s.cin * s.k * s.k);
    let work = s.batch * s.cout * ho * wo * s.cin * s.k * s.k;
    run_regions(dw, s.cin * s.k * s.k, work, |co, dw_f| {
        dw_f.fill(0.0);
        for bi in 0..s.batch {
            let x_img = &x[bi * s.cin * s.h * s.w..(bi + 1) * s.cin * s.h * s.w];
            let dy_pl = &dy[(bi * s.cout + co) * ho * wo..(bi * s.cout + co + 1) * ho * wo];
            if s.k == 1 && s.stride == 1 && s.pad == 0 {
                for ci in 0..s.cin {
                    dw_f[ci] += dot(dy_pl, &x_img[ci * s.h * s.w..(ci + 1) * s.h * s.w]);
                }
                continue;
            }
            for ci in 0..s.cin {
                let x_pl = &x_img[ci * s.h * s.w..(ci + 1) * s.h * s.w];
                for kh in 0..s.k {
                    for kw in 0..s.k {
                        let mut acc = 0.0;
                        for oh in 0..ho {
                            let ih = (oh * s.stride + kh) as isize - s.pad as isize;
                            if ih < 0 || ih >= s.h as isize {
                                continue;
                            }
                            for ow in 0..wo {
                                let iw = (ow * s.stride + kw) as isize - s.pad as isize;
                                if iw < 0 || iw >= s.w as isize {
                                    continue;
                                }
                                acc += dy_pl[oh * wo + ow] * x_pl[ih as usize * s.w + iw as usize];
                            }
                        }
                        dw_f[(ci * s.k + kh) * s.k + kw] += acc;
                    }
                }
            }
        }
    });
}

/// Bias gradient of [`conv2d`] (and of the transposed variant): per output
/// channel sum of `dy`.
pub fn conv2d_grad_b(dy: &[Elem], batch: usize, cout: usize, plane: usize, db: &mut [Elem]) {
    debug_assert_eq!(db.len(), cout);
    for (co, d) in db.iter_mut().enumerate() {
        let mut acc = 0.0;
        for bi in 0..batch {
            let pl = &dy[(bi * cout + co) * plane..(bi * cout + co + 1) * plane];
            for &v in pl {
                acc += v;
            }
        }
        *d = acc;
    }
}

// ---------------------------------------------------------------------------
// Transposed 2-D convolution (weight layout [cin, cout, k, k])
// ---------------------------------------------------------------------------

/// Forward transposed convolution: `x` is `[batch, cin, h, w]`, `w` is
/// `[cin, cout, k, k]`, `out` is `[batch, cout, oh, ow]` with
/// `oh = (h-1)·stride + k - 2·pad`.
pub fn conv_transpose2d(
    x: &[Elem],
    w: &[Elem],
    bias: Option<&[Elem]>,
    s: ConvShape,
    out: &mut [Elem],
) {
    let (oh_n, ow_n) = s.tconv_out_hw();
    debug_assert_eq!(out.len(), s.batch * s.cout * oh_n * ow_n);
    let work = s.batch * s.cout * oh_n * ow_n * s.cin * s.k * s.k / s.stride.max(1);
    run_regions(out, oh_n * ow_n, work, |idx, plane| {
        let (bi, co) = (idx / s.cout, idx % s.cout);
        let x_img = &x[bi * s.cin * s.h * s.w..(bi + 1) * s.cin * s.h * s.w];
        let b0 = bias.map_or(0.0, |b| b[co]);
        for oh in 0..oh_n {
            for ow in 0..ow_n {
                let mut acc = b0;
                for kh in 0..s.k {
                    let ih_num = oh as isize + s.pad as isize - kh as isize;
                    if ih_num < 0 || ih_num % s.stride as isize != 0 {
                        continue;
                    }
                    let ih = ih_num as usize / s.stride;
                    if ih >= s.h {
                        continue;
                    }
                    for kw in 0..s.k {
                        let iw_num = ow as isize + s.pad as isize - kw as isize;
                        if iw_num < 0 || iw_num % s.stride as isize != 0 {
                            continue;
                        }
                        let iw = iw_num as usize / s.stride;
                        if iw >= s.w {
                            continue;
                        }
                        for ci in 0..s.cin {
                            acc += x_img[(ci * s.h + ih) * s.w + iw]
                                * w[((ci * s.cout + co) * s.k + kh) * s.k + kw];
                        }
                    }
                }
                plane[oh * ow_n + ow] = acc;
            }
        }
    });
}

/// Input gradient of [`conv_transpose2d`].
pub fn conv_transpose2d_grad_x(dy: &[Elem], w: &[Elem], s: ConvShape, dx: &mut [Elem]) {
    let (oh_n, ow_n) = s.tconv_out_hw();
    debug_assert_eq!(dx.len(), s.batch * s.cin * s.h * s.w);
    let work = dx.len() * s.cout * s.k * s.k;
    run_regions(dx, s.h * s.w, work, |idx, plane| {
        let (bi, ci) = (idx / s.cin, idx % s.cin);
        let dy_img = &dy[bi * s.cout * oh_n * ow_n..(bi + 1) * s.cout * oh_n * ow_n];
        for ih in 0..s.h {
            for iw in 0..s.w {
                let mut acc = 0.0;
                for kh in 0..s.k {
                    let oh = (ih * s.stride + kh) as isize - s.pad as isize;
                    if oh < 0 || oh >= oh_n as isize {
                        continue;
                    }
                    for kw in 0..s.k {
                        let ow = (iw * s.stride + kw) as isize - s.pad as isize;
                        if ow < 0 || ow >= ow_n as isize {
                            continue;
                        }
                        for co in 0..s.cout {
                            acc += dy_img[(co * oh_n + oh as usize) * ow_n + ow as usize]
                                * w[((ci * s.cout + co) * s.k + kh) * s.k + kw];
                        }
                    }
                }
                plane[ih * s.w + iw] = acc;
            }
        }
    });
}

/// Weight gradient of [`conv_transpose2d`]: `dw[cin, cout, k, k]`.
pub fn conv_transpose2d_grad_w(x: &[Elem], dy: &[Elem], s: ConvShape, dw: &mut [Elem]) {
    let (oh_n, ow_n) = s.tconv_out_hw();
    debug_assert_eq!(dw.len(), s.cin * s.cout * s.k * s.k);
    let work = s.batch * s.h * s.w * s.cout * s.k * s.k;
    run_regions(dw, s.cout * s.k * s.k, work, |ci, dw_c| {
        dw_c.fill(0.0);
        for bi in 0..s.batch {
            let x_pl = &x[(bi * s.cin + ci) * s.h * s.w..(bi * s.cin + ci + 1) * s.h * s.w];
            let dy_img = &dy[bi * s.cout * oh_n * ow_n..(bi + 1) * s.cout * oh_n * ow_n];
            for co in 0..s.cout {
                let dy_pl = &dy_img[co * oh_n * ow_n..(co + 1) * oh_n * ow_n];
                for kh in 0..s.k {
                    for kw in 0..s.k {
                        let mut acc = 0.0;
                        for ih in 0..s.h {
                            let oh = (ih * s.stride + kh) as isize - s.pad as isize;
                            if oh < 0 || oh >= oh_n as isize {
                                continue;
                            }
                            for iw in 0..s.w {
                                let ow = (iw * s.stride + kw) as isize - s.pad as isize;
                                if ow < 0 || ow >= ow_n as isize {
                                    continue;
                                }
                                acc += x_pl[ih * s.w + iw]
                                    * dy_pl[oh as usize * ow_n + ow as usize];
                            }
                        }
                        dw_c[(co * s.k + kh) * s.k + kw] += acc;
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Bilinear interpolation (integer upsampling factor, half-pixel centers,
// edge clamp)
// ---------------------------------------------------------------------------

#[inline]
fn bilinear_taps(o: usize, scale: usize, size: usize) -> (usize, usize, Elem) {
    // Source coordinate under half-pixel center alignment.
    let src = (o as Elem + 0.5) / scale as Elem - 0.5;
    let i0f = src.floor();
    let frac = src - i0f;
    let i0 = (i0f as isize).clamp(0, size as isize - 1) as usize;
    let i1 = (i0f as isize + 1).clamp(0, size as isize - 1) as usize;
    (i0, i1, frac)
}

#[inline]
fn bilinear_plane(x_pl: &[Elem], h: usize, w: usize, scale: usize, plane: &mut [Elem]) {
    let (ho, wo) = (h * scale, w * scale);
    for oh in 0..ho {
        let (i0, i1, fh) = bilinear_taps(oh, scale, h);
        for ow in 0..wo {
            let (j0, j1, fw) = bilinear_taps(ow, scale, w);
            plane[oh * wo + ow] = (1.0 - fh) * (1.0 - fw) * x_pl[i0 * w + j0]
                + (1.0 - fh) * fw * x_pl[i0 * w + j1]
                + fh * (1.0 - fw) * x_pl[i1 * w + j0]
                + fh * fw * x_pl[i1 * w + j1];
        }
    }
}

/// Upsample every `[h, w]` plane of `x` by an integer `scale` with bilinear
/// interpolation (half-pixel centers, edges clamped).
pub fn bilinear_up(x: &[Elem], planes: usize, h: usize, w: usize, scale: usize, out: &mut [Elem]) {
    let (ho, wo) = (h * scale, w * scale);
    debug_assert_eq!(x.len(), planes * h * w);
    debug_assert_eq!(out.len(), planes * ho * wo);
    run_regions(out, ho * wo, planes * ho * wo * 4, |p, plane| {
        bilinear_plane(&x[p * h * w..(p + 1) * h * w], h, w, scale, plane);
    });
}

/// Sequential twin of [`bilinear_up`].
pub fn bilinear_up_seq(
    x: &[Elem],
    planes: usize,
    h: usize,
    w: usize,
    scale: usize,
    out: &mut [Elem],
) {
    let (ho, wo) = (h * scale, w * scale);
    debug_assert_eq!(x.len(), planes * h * w);
    debug_assert_eq!(out.len(), planes * ho * wo);
    for (p, plane) in out.chunks_mut(ho * wo).enumerate() {
        bilinear_plane(&x[p * h * w..(p + 1) * h * w], h, w, scale, plane);
    }
}

/// Gradient of [`bilinear_up`]: scatter `dy` back through the four taps.
pub fn bilinear_up_grad(
    dy: &[Elem],
    planes: usize,
    h: usize,
    w: usize,
    scale: usize,
    dx: &mut [Elem],
) {
    let (ho, wo) = (h * scale, w * scale);
    debug_assert_eq!(dx.len(), planes * h * w);
    run_regions(dx, h * w, planes * ho * wo * 4, |p, plane| {
        plane.fill(0.0);
        let dy_pl = &dy[p * ho * wo..(p + 1) * ho * wo];
        for oh in 0..ho {
            let (i0, i1, fh) = bilinear_taps(oh, scale, h);
            for ow in 0..wo {
                let (j0, j1, fw) = bilinear_taps(ow, scale, w);
                let g = dy_pl[oh * wo + ow];
                plane[i0 * w + j0] += (1.0 - fh) * (1.0 - fw) * g;
                plane[i0 * w + j1] += (1.0 - fh) * fw * g;
                plane[i1 * w + j0] += fh * (1.0 - fw) * g;
                plane[i1 * w + j1] += fh * fw * g;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Numerically stable softmax over the middle axis of `x` viewed as
/// `[outer, len, inner]`.
pub fn softmax_lanes(x: &[Elem], out: &mut [Elem], outer: usize, len: usize, inner: usize) {
    debug_assert_eq!(x.len(), outer * len * inner);
    debug_assert_eq!(out.len(), x.len());
    run_regions(out, len * inner, outer * len * inner * 2, |o, chunk| {
        let src = &x[o * len * inner..(o + 1) * len * inner];
        for j in 0..inner {
            let mut max = Elem::NEG_INFINITY;
            for l in 0..len {
                max = max.max(src[l * inner + j]);
            }
            let mut sum = 0.0;
            for l in 0..len {
                let e = (src[l * inner + j] - max).exp();
                chunk[l * inner + j] = e;
                sum += e;
            }
            for l in 0..len {
                chunk[l * inner + j] /= sum;
            }
        }
    });
}

/// In-place row-wise softmax over a `[rows × width]` buffer.
pub fn softmax_rows_inplace(buf: &mut [Elem], width: usize) {
    debug_assert!(width > 0 && buf.len() % width == 0);
    run_regions(buf, width, buf.len() * 2, |_, row| {
        let mut max = Elem::NEG_INFINITY;
        for &v in row.iter() {
            max = max.max(v);
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    });
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

#[inline]
fn attn_row(
    q_row: &[Elem],
    k: &[Elem],
    v: &[Elem],
    nk: usize,
    dk: usize,
    scale: Elem,
    scratch: &mut Vec<Elem>,
    out_row: &mut [Elem],
) {
    scratch.clear();
    let mut max = Elem::NEG_INFINITY;
    for j in 0..nk {
        let s = scale * dot(q_row, &k[j * dk..(j + 1) * dk]);
        scratch.push(s);
        max = max.max(s);
    }
    let mut sum = 0.0;
    for s in scratch.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    out_row.fill(0.0);
    for j in 0..nk {
        axpy(scratch[j] / sum, &v[j * dk..(j + 1) * dk], out_row);
    }
}

/// Single-head attention `softmax(q·kᵀ·scale)·v` without materializing the
/// score matrix: each query row keeps only one length-`nk` scratch buffer.
/// `q` is `[nq × dk]`, `k`/`v` are `[nk × dk]`, `out` is `[nq × dk]`.
pub fn attn_stream(
    q: &[Elem],
    k: &[Elem],
    v: &[Elem],
    nq: usize,
    nk: usize,
    dk: usize,
    scale: Elem,
    out: &mut [Elem],
) {
    debug_assert_eq!(q.len(), nq * dk);
    debug_assert_eq!(k.len(), nk * dk);
    debug_assert_eq!(v.len(), nk * dk);
    debug_assert_eq!(out.len(), nq * dk);
    #[cfg(feature = "parallel")]
    {
        if nq > 1 && nq * nk * dk >= PAR_THRESHOLD {
            out.par_chunks_mut(dk).enumerate().for_each_init(
                || Vec::with_capacity(nk),
                |scratch, (i, row)| {
                    attn_row(&q[i * dk..(i + 1) * dk], k, v, nk, dk, scale, scratch, row);
                },
            );
            return;
        }
    }
    let mut scratch = Vec::with_capacity(nk);
    for (i, row) in out.chunks_mut(dk).enumerate() {
        attn_row(&q[i * dk..(i + 1) * dk], k, v, nk, dk, scale, &mut scratch, row);
    }
}

/// Sequential twin of [`attn_stream`].
pub fn attn_stream_seq(
    q: &[Elem],
    k: &[Elem],
    v: &[Elem],
    nq: usize,
    nk: usize,
    dk: usize,
    scale: Elem,
    out: &mut [Elem],
) {
    debug_assert_eq!(q.len(), nq * dk);
    let mut scratch = Vec::with_capacity(nk);
    for (i, row) in out.chunks_mut(dk).enumerate() {
        attn_row(&q[i * dk..(i + 1) * dk], k, v, nk, dk, scale, &mut scratch, row);
    }
}
