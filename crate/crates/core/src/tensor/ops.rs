//! Differentiable tensor operations.
//!
//! Each op validates its inputs, computes the forward result through
//! [`crate::kernels`], and — when gradients are being recorded — attaches a
//! [`BackOp`] holding exactly the context its backward pass needs. Under
//! [`super::no_grad`] no context is kept and attention switches to a
//! streaming kernel that never materializes the score matrix.

use std::rc::Rc;

use super::{grad_enabled, Tensor};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvShape};
use crate::Elem;

fn dim_err(msg: String) -> Error {
    Error::Dim(msg)
}

fn track(parents: &[&Tensor]) -> bool {
    grad_enabled() && parents.iter().any(|p| p.node.requires_grad)
}

fn make(data: Vec<Elem>, shape: Vec<usize>, parents: Vec<Tensor>, back: BackOp) -> Tensor {
    if grad_enabled() && parents.iter().any(|p| p.node.requires_grad) {
        Tensor::from_parts(data, shape, true, parents, Some(back))
    } else {
        Tensor::from_parts(data, shape, false, Vec::new(), None)
    }
}

fn require_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.shape().len() != rank {
        return Err(dim_err(format!(
            "{what}: expected rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn col_sums(g: &[Elem], rows: usize, n: usize) -> Vec<Elem> {
    let mut out = vec![0.0; n];
    for r in 0..rows {
        for j in 0..n {
            out[j] += g[r * n + j];
        }
    }
    out
}

/// Copy a column block `[col0, col0+width)` out of a `[rows × c]` matrix.
fn gather_cols(src: &[Elem], rows: usize, c: usize, col0: usize, width: usize, dst: &mut [Elem]) {
    debug_assert_eq!(dst.len(), rows * width);
    for r in 0..rows {
        dst[r * width..(r + 1) * width]
            .copy_from_slice(&src[r * c + col0..r * c + col0 + width]);
    }
}

/// Write a `[rows × width]` block into a column slice of a `[rows × c]`
/// matrix (overwrite).
fn scatter_cols(src: &[Elem], rows: usize, c: usize, col0: usize, width: usize, dst: &mut [Elem]) {
    for r in 0..rows {
        dst[r * c + col0..r * c + col0 + width].copy_from_slice(&src[r * width..(r + 1) * width]);
    }
}

// ---------------------------------------------------------------------------
// Backward context
// ---------------------------------------------------------------------------

pub(crate) struct AttnCtx {
    pub heads: usize,
    pub scale: Elem,
    pub batch: usize,
    pub nq: usize,
    pub nk: usize,
    pub c: usize,
    pub q: Vec<Elem>,
    pub k: Vec<Elem>,
    pub v: Vec<Elem>,
    pub probs: Vec<Elem>,
    pub o: Vec<Elem>,
}

pub(crate) struct TverskyCtx {
    pub alpha: Elem,
    pub beta: Elem,
    pub target: Rc<Vec<Elem>>,
    /// Per-class numerator `TP_c + eps`.
    pub num: Vec<Elem>,
    /// Per-class denominator `TP_c + alpha·FP_c + beta·FN_c + eps`.
    pub den: Vec<Elem>,
}

pub(crate) enum BackOp {
    Matmul,
    Linear { rows: usize },
    Conv2d { s: ConvShape },
    ConvT2d { s: ConvShape },
    Add,
    Mul,
    Scale { c: Elem },
    LeakyRelu { slope: Elem },
    Relu,
    Gelu,
    Softmax { outer: usize, len: usize, inner: usize },
    Bilinear { scale: usize },
    ConcatC { splits: Vec<usize> },
    SliceC { c0: usize },
    NchwToTokens,
    TokensToNchw,
    SpaceToPatch { r: usize },
    LayerNorm { mean: Vec<Elem>, rstd: Vec<Elem> },
    BnTrain { mean: Vec<Elem>, rstd: Vec<Elem> },
    BnEval { rm: Vec<Elem>, rstd: Vec<Elem> },
    Attention(Box<AttnCtx>),
    SumAll,
    MeanAll,
    CrossEntropy { labels: Rc<Vec<u8>>, probs: Vec<Elem> },
    Tversky(Box<TverskyCtx>),
}

impl BackOp {
    /// Gradients for each parent (aligned with `node.parents`), or `None`
    /// where the parent does not track gradients.
    pub(crate) fn backward(&self, node: &super::Node, g: &[Elem]) -> Vec<Option<Vec<Elem>>> {
        let parents = &node.parents;
        let need = |i: usize| parents[i].node.requires_grad;
        match self {
            BackOp::Matmul => {
                let a = &parents[0];
                let b = &parents[1];
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let da = need(0).then(|| {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt(g, b.data(), &mut da, m, n, k);
                    da
                });
                let db = need(1).then(|| {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn(a.data(), g, &mut db, m, k, n);
                    db
                });
                vec![da, db]
            }
            BackOp::Linear { rows } => {
                let x = &parents[0];
                let w = &parents[1];
                let (din, dout) = (w.shape()[0], w.shape()[1]);
                let dx = need(0).then(|| {
                    let mut dx = vec![0.0; rows * din];
                    kernels::matmul_nt(g, w.data(), &mut dx, *rows, dout, din);
                    dx
                });
                let dw = need(1).then(|| {
                    let mut dw = vec![0.0; din * dout];
                    kernels::matmul_tn(x.data(), g, &mut dw, *rows, din, dout);
                    dw
                });
                let mut out = vec![dx, dw];
                if parents.len() == 3 {
                    out.push(need(2).then(|| col_sums(g, *rows, dout)));
                }
                out
            }
            BackOp::Conv2d { s } => {
                let x = &parents[0];
                let dx = need(0).then(|| {
                    let mut dx = vec![0.0; x.numel()];
                    kernels::conv2d_grad_x(g, parents[1].data(), *s, &mut dx);
                    dx
                });
                let dw = need(1).then(|| {
                    let mut dw = vec![0.0; parents[1].numel()];
                    kernels::conv2d_grad_w(x.data(), g, *s, &mut dw);
                    dw
                });
                let mut out = vec![dx, dw];
                if parents.len() == 3 {
                    out.push(need(2).then(|| {
                        let (ho, wo) = s.out_hw();
                        let mut db = vec![0.0; s.cout];
                        kernels::conv2d_grad_b(g, s.batch, s.cout, ho * wo, &mut db);
                        db
                    }));
                }
                out
            }
            BackOp::ConvT2d { s } => {
                let x = &parents[0];
                let dx = need(0).then(|| {
                    let mut dx = vec![0.0; x.numel()];
                    kernels::conv_transpose2d_grad_x(g, parents[1].data(), *s, &mut dx);
                    dx
                });
                let dw = need(1).then(|| {
                    let mut dw = vec![0.0; parents[1].numel()];
                    kernels::conv_transpose2d_grad_w(x.data(), g, *s, &mut dw);
                    dw
                });
                let mut out = vec![dx, dw];
                if parents.len() == 3 {
                    out.push(need(2).then(|| {
                        let (ho, wo) = s.tconv_out_hw();
                        let mut db = vec![0.0; s.cout];
                        kernels::conv2d_grad_b(g, s.batch, s.cout, ho * wo, &mut db);
                        db
                    }));
                }
                out
            }
            BackOp::Add => vec![
                need(0).then(|| g.to_vec()),
                need(1).then(|| g.to_vec()),
            ],
            BackOp::Mul => {
                let a = parents[0].data();
                let b = parents[1].data();
                vec![
                    need(0).then(|| g.iter().zip(b).map(|(&gi, &bi)| gi * bi).collect()),
                    need(1).then(|| g.iter().zip(a).map(|(&gi, &ai)| gi * ai).collect()),
                ]
            }
            BackOp::Scale { c } => vec![need(0).then(|| g.iter().map(|&gi| gi * c).collect())],
            BackOp::LeakyRelu { slope } => {
                let x = parents[0].data();
                vec![need(0).then(|| {
                    g.iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi > 0.0 { gi } else { gi * slope })
                        .collect()
                })]
            }
            BackOp::Relu => {
                let x = parents[0].data();
                vec![need(0).then(|| {
                    g.iter().zip(x).map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 }).collect()
                })]
            }
            BackOp::Gelu => {
                let x = parents[0].data();
                vec![need(0).then(|| {
                    g.iter().zip(x).map(|(&gi, &xi)| gi * gelu_grad(xi)).collect()
                })]
            }
            BackOp::Softmax { outer, len, inner } => {
                let p = &node.data;
                vec![need(0).then(|| {
                    let mut dx = vec![0.0; p.len()];
                    for o in 0..*outer {
                        let base = o * len * inner;
                        for j in 0..*inner {
                            let mut dot = 0.0;
                            for l in 0..*len {
                                let i = base + l * inner + j;
                                dot += g[i] * p[i];
                            }
                            for l in 0..*len {
                                let i = base + l * inner + j;
                                dx[i] = p[i] * (g[i] - dot);
                            }
                        }
                    }
                    dx
                })]
            }
            BackOp::Bilinear { scale } => {
                let xs = parents[0].shape();
                let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                vec![need(0).then(|| {
                    let mut dx = vec![0.0; parents[0].numel()];
                    kernels::bilinear_up_grad(g, planes, h, w, *scale, &mut dx);
                    dx
                })]
            }
            BackOp::ConcatC { splits } => {
                let shape = &node.shape;
                let (b, ct, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut out = Vec::with_capacity(parents.len());
                let mut off = 0;
                for (i, &ci) in splits.iter().enumerate() {
                    out.push(need(i).then(|| {
                        let mut dp = vec![0.0; b * ci * hw];
                        for bi in 0..b {
                            let src = &g[(bi * ct + off) * hw..(bi * ct + off + ci) * hw];
                            dp[bi * ci * hw..(bi + 1) * ci * hw].copy_from_slice(src);
                        }
                        dp
                    }));
                    off += ci;
                }
                out
            }
            BackOp::SliceC { c0 } => {
                let xs = parents[0].shape();
                let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let cs = node.shape[1];
                vec![need(0).then(|| {
                    let mut dx = vec![0.0; parents[0].numel()];
                    for bi in 0..b {
                        dx[(bi * c + c0) * hw..(bi * c + c0 + cs) * hw]
                            .copy_from_slice(&g[bi * cs * hw..(bi + 1) * cs * hw]);
                    }
                    dx
                })]
            }
            BackOp::NchwToTokens => {
                let xs = parents[0].shape();
                let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                vec![need(0).then(|| {
                    let mut dx = vec![0.0; parents[0].numel()];
                    for bi in 0..b {
                        for ci in 0..c {
                            for t in 0..hw {
                                dx[(bi * c + ci) * hw + t] = g[(bi * hw + t) * c + ci];
                            }
                        }
                    }
                    dx
                })]
            }
            BackOp::TokensToNchw => {
                let xs = parents[0].shape();
                let (b, n, c) = (xs[0], xs[1], xs[2]);
                vec![need(0).then(|| {
                    let mut dx = vec![0.0; parents[0].numel()];
                    for bi in 0..b {
                        for t in 0..n {
                            for ci in 0..c {
                                dx[(bi * n + t) * c + ci] = g[(bi * c + ci) * n + t];
                            }
                        }
                    }
                    dx
                })]
            }
            BackOp::SpaceToPatch { r } => {
                let xs = parents[0].shape();
                let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (hp, wp) = (h / r, w / r);
                vec![need(0).then(|| {
                    let mut dx = vec![0.0; parents[0].numel()];
                    let fw = c * r * r;
                    for bi in 0..b {
                        for ph in 0..hp {
                            for pw in 0..wp {
                                let t = ph * wp + pw;
                                let row = &g[(bi * hp * wp + t) * fw..(bi * hp * wp + t + 1) * fw];
                                for ci in 0..c {
                                    for dy in 0..*r {
                                        for dxx in 0..*r {
                                            dx[((bi * c + ci) * h + ph * r + dy) * w
                                                + pw * r
                                                + dxx] = row[ci * r * r + dy * r + dxx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    dx
                })]
            }
            BackOp::LayerNorm { mean, rstd } => {
                let x = parents[0].data();
                let gamma = parents[1].data();
                let d = gamma.len();
                let rows = x.len() / d;
                let mut dx = need(0).then(|| vec![0.0; x.len()]);
                let mut dgamma = need(1).then(|| vec![0.0; d]);
                let mut dbeta = need(2).then(|| vec![0.0; d]);
                let mut a = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                for r in 0..rows {
                    let xr = &x[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean[r]) * rstd[r];
                        a[j] = gr[j] * gamma[j];
                    }
                    if let Some(dg) = dgamma.as_mut() {
                        for j in 0..d {
                            dg[j] += gr[j] * xhat[j];
                        }
                    }
                    if let Some(db) = dbeta.as_mut() {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let ma = a.iter().sum::<Elem>() / d as Elem;
                        let max = a.iter().zip(&xhat).map(|(&u, &v)| u * v).sum::<Elem>()
                            / d as Elem;
                        for j in 0..d {
                            dx[r * d + j] = rstd[r] * (a[j] - ma - xhat[j] * max);
                        }
                    }
                }
                vec![dx, dgamma, dbeta]
            }
            BackOp::BnTrain { mean, rstd } => {
                let x = parents[0].data();
                let gamma = parents[1].data();
                let xs = parents[0].shape();
                let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let n = (b * hw) as Elem;
                let mut dx = need(0).then(|| vec![0.0; x.len()]);
                let mut dgamma = need(1).then(|| vec![0.0; c]);
                let mut dbeta = need(2).then(|| vec![0.0; c]);
                for ci in 0..c {
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ci) * hw;
                        for i in 0..hw {
                            let xhat = (x[base + i] - mean[ci]) * rstd[ci];
                            sum_g += g[base + i];
                            sum_gx += g[base + i] * xhat;
                        }
                    }
                    if let Some(dg) = dgamma.as_mut() {
                        dg[ci] = sum_gx;
                    }
                    if let Some(db) = dbeta.as_mut() {
                        db[ci] = sum_g;
                    }
                    if let Some(dx) = dx.as_mut() {
                        let k = gamma[ci] * rstd[ci];
                        for bi in 0..b {
                            let base = (bi * c + ci) * hw;
                            for i in 0..hw {
                                let xhat = (x[base + i] - mean[ci]) * rstd[ci];
                                dx[base + i] =
                                    k * (g[base + i] - sum_g / n - xhat * sum_gx / n);
                            }
                        }
                    }
                }
                vec![dx, dgamma, dbeta]
            }
            BackOp::BnEval { rm, rstd } => {
                let x = parents[0].data();
                let gamma = parents[1].data();
                let xs = parents[0].shape();
                let (b, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let mut dx = need(0).then(|| vec![0.0; x.len()]);
                let mut dgamma = need(1).then(|| vec![0.0; c]);
                let mut dbeta = need(2).then(|| vec![0.0; c]);
                for ci in 0..c {
                    for bi in 0..b {
                        let base = (bi * c + ci) * hw;
                        for i in 0..hw {
                            let gi = g[base + i];
                            if let Some(dx) = dx.as_mut() {
                                dx[base + i] = gi * gamma[ci] * rstd[ci];
                            }
                            if let Some(dg) = dgamma.as_mut() {
                                dg[ci] += gi * (x[base + i] - rm[ci]) * rstd[ci];
                            }
                            if let Some(db) = dbeta.as_mut() {
                                db[ci] += gi;
                            }
                        }
                    }
                }
                vec![dx, dgamma, dbeta]
            }
            BackOp::Attention(ctx) => attention_backward(ctx, parents, g),
            BackOp::SumAll => vec![need(0).then(|| vec![g[0]; parents[0].numel()])],
            BackOp::MeanAll => {
                let n = parents[0].numel();
                vec![need(0).then(|| vec![g[0] / n as Elem; n])]
            }
            BackOp::CrossEntropy { labels, probs } => {
                let ls = parents[0].shape();
                let (b, c, hw) = (ls[0], ls[1], ls[2] * ls[3]);
                let npix = (b * hw) as Elem;
                vec![need(0).then(|| {
                    let mut dx = vec![0.0; probs.len()];
                    let scale = g[0] / npix;
                    for bi in 0..b {
                        for pos in 0..hw {
                            let lab = labels[bi * hw + pos] as usize;
                            for ci in 0..c {
                                let i = (bi * c + ci) * hw + pos;
                                let t = if ci == lab { 1.0 } else { 0.0 };
                                dx[i] = scale * (probs[i] - t);
                            }
                        }
                    }
                    dx
                })]
            }
            BackOp::Tversky(ctx) => {
                let ps = parents[0].shape();
                let (c, hw) = (ps[1], ps[2] * ps[3]);
                let classes = c as Elem;
                vec![need(0).then(|| {
                    let mut dx = vec![0.0; parents[0].numel()];
                    let scale = -g[0] / classes;
                    for (i, d) in dx.iter_mut().enumerate() {
                        let ci = (i / hw) % c;
                        let t = ctx.target[i];
                        let dn = t;
                        let dd = t * (1.0 - ctx.alpha - ctx.beta) + ctx.alpha;
                        let den = ctx.den[ci];
                        *d = scale * (dn * den - ctx.num[ci] * dd) / (den * den);
                    }
                    dx
                })]
            }
        }
    }
}

fn attention_backward(
    ctx: &AttnCtx,
    parents: &[Tensor],
    g: &[Elem],
) -> Vec<Option<Vec<Elem>>> {
    let AttnCtx { heads, scale, batch, nq, nk, c, q, k, v, probs, o } = ctx;
    let (heads, batch, nq, nk, c) = (*heads, *batch, *nq, *nk, *c);
    let dk = c / heads;
    let need: Vec<bool> = parents.iter().map(|p| p.node.requires_grad).collect();
    let rows_q = batch * nq;
    let rows_k = batch * nk;

    // Through the output projection.
    let mut d_o = vec![0.0; rows_q * c];
    kernels::matmul_nt(g, parents[5].data(), &mut d_o, rows_q, c, c);
    let dwo = need[5].then(|| {
        let mut dwo = vec![0.0; c * c];
        kernels::matmul_tn(o, g, &mut dwo, rows_q, c, c);
        dwo
    });

    // Through the per-head attention.
    let mut dq = vec![0.0; rows_q * c];
    let mut dkk = vec![0.0; rows_k * c];
    let mut dv = vec![0.0; rows_k * c];
    let mut qh = vec![0.0; nq * dk];
    let mut kh = vec![0.0; nk * dk];
    let mut vh = vec![0.0; nk * dk];
    let mut doh = vec![0.0; nq * dk];
    let mut dp = vec![0.0; nq * nk];
    let mut dqh = vec![0.0; nq * dk];
    let mut dkh = vec![0.0; nk * dk];
    let mut dvh = vec![0.0; nk * dk];
    for bi in 0..batch {
        let q_b = &q[bi * nq * c..(bi + 1) * nq * c];
        let k_b = &k[bi * nk * c..(bi + 1) * nk * c];
        let v_b = &v[bi * nk * c..(bi + 1) * nk * c];
        let do_b = &d_o[bi * nq * c..(bi + 1) * nq * c];
        for h in 0..heads {
            gather_cols(q_b, nq, c, h * dk, dk, &mut qh);
            gather_cols(k_b, nk, c, h * dk, dk, &mut kh);
            gather_cols(v_b, nk, c, h * dk, dk, &mut vh);
            gather_cols(do_b, nq, c, h * dk, dk, &mut doh);
            let p = &probs[(bi * heads + h) * nq * nk..(bi * heads + h + 1) * nq * nk];

            // dP, then softmax backward into dS (scaled).
            kernels::matmul_nt(&doh, &vh, &mut dp, nq, dk, nk);
            for i in 0..nq {
                let pr = &p[i * nk..(i + 1) * nk];
                let dpr = &mut dp[i * nk..(i + 1) * nk];
                let mut dot = 0.0;
                for j in 0..nk {
                    dot += dpr[j] * pr[j];
                }
                for j in 0..nk {
                    dpr[j] = pr[j] * (dpr[j] - dot) * scale;
                }
            }
            kernels::matmul(&dp, &kh, &mut dqh, nq, nk, dk);
            kernels::matmul_tn(&dp, &qh, &mut dkh, nq, nk, dk);
            kernels::matmul_tn(p, &doh, &mut dvh, nq, nk, dk);

            let dq_b = &mut dq[bi * nq * c..(bi + 1) * nq * c];
            scatter_cols_add(&dqh, nq, c, h * dk, dk, dq_b);
            let dk_b = &mut dkk[bi * nk * c..(bi + 1) * nk * c];
            scatter_cols_add(&dkh, nk, c, h * dk, dk, dk_b);
            let dv_b = &mut dv[bi * nk * c..(bi + 1) * nk * c];
            scatter_cols_add(&dvh, nk, c, h * dk, dk, dv_b);
        }
    }

    // Through the input projections.
    let dq_src = need[0].then(|| {
        let mut d = vec![0.0; rows_q * c];
        kernels::matmul_nt(&dq, parents[2].data(), &mut d, rows_q, c, c);
        d
    });
    let dkv_src = need[1].then(|| {
        let mut d = vec![0.0; rows_k * c];
        kernels::matmul_nt(&dkk, parents[3].data(), &mut d, rows_k, c, c);
        let mut dv_in = vec![0.0; rows_k * c];
        kernels::matmul_nt(&dv, parents[4].data(), &mut dv_in, rows_k, c, c);
        for (a, b) in d.iter_mut().zip(&dv_in) {
            *a += b;
        }
        d
    });
    let dwq = need[2].then(|| {
        let mut dw = vec![0.0; c * c];
        kernels::matmul_tn(parents[0].data(), &dq, &mut dw, rows_q, c, c);
        dw
    });
    let dwk = need[3].then(|| {
        let mut dw = vec![0.0; c * c];
        kernels::matmul_tn(parents[1].data(), &dkk, &mut dw, rows_k, c, c);
        dw
    });
    let dwv = need[4].then(|| {
        let mut dw = vec![0.0; c * c];
        kernels::matmul_tn(parents[1].data(), &dv, &mut dw, rows_k, c, c);
        dw
    });
    vec![dq_src, dkv_src, dwq, dwk, dwv, dwo]
}

/// Add a `[rows × width]` block into a column slice of a `[rows × c]` matrix.
fn scatter_cols_add(src: &[Elem], rows: usize, c: usize, col0: usize, width: usize, dst: &mut [Elem]) {
    for r in 0..rows {
        for j in 0..width {
            dst[r * c + col0 + j] += src[r * width + j];
        }
    }
}

#[inline]
fn gelu_val(x: Elem) -> Elem {
    const C: Elem = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: Elem) -> Elem {
    const C: Elem = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044_715 * x * x)
}

// ---------------------------------------------------------------------------
// Op constructors
// ---------------------------------------------------------------------------

impl Tensor {
    /// Strict 2-D matrix product `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        require_rank(self, 2, "matmul lhs")?;
        require_rank(rhs, 2, "matmul rhs")?;
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (rhs.shape()[0], rhs.shape()[1]);
        if k != k2 {
            return Err(dim_err(format!(
                "matmul: cannot multiply {:?} by {:?} (inner dimensions {k} vs {k2})",
                self.shape(),
                rhs.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.data(), rhs.data(), &mut out, m, k, n);
        Ok(make(out, vec![m, n], vec![self.clone(), rhs.clone()], BackOp::Matmul))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(dim_err(format!(
                "add: shapes {:?} and {:?} differ",
                self.shape(),
                rhs.shape()
            )));
        }
        let out = self.data().iter().zip(rhs.data()).map(|(&a, &b)| a + b).collect();
        Ok(make(out, self.shape().to_vec(), vec![self.clone(), rhs.clone()], BackOp::Add))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(dim_err(format!(
                "mul: shapes {:?} and {:?} differ",
                self.shape(),
                rhs.shape()
            )));
        }
        let out = self.data().iter().zip(rhs.data()).map(|(&a, &b)| a * b).collect();
        Ok(make(out, self.shape().to_vec(), vec![self.clone(), rhs.clone()], BackOp::Mul))
    }

    pub fn scale(&self, c: Elem) -> Tensor {
        let out = self.data().iter().map(|&v| v * c).collect();
        make(out, self.shape().to_vec(), vec![self.clone()], BackOp::Scale { c })
    }

    pub fn leaky_relu(&self, slope: Elem) -> Tensor {
        let out = self
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { v * slope })
            .collect();
        make(out, self.shape().to_vec(), vec![self.clone()], BackOp::LeakyRelu { slope })
    }

    pub fn relu(&self) -> Tensor {
        let out = self.data().iter().map(|&v| v.max(0.0)).collect();
        make(out, self.shape().to_vec(), vec![self.clone()], BackOp::Relu)
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&self) -> Tensor {
        let out = self.data().iter().map(|&v| gelu_val(v)).collect();
        make(out, self.shape().to_vec(), vec![self.clone()], BackOp::Gelu)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let rank = self.shape().len();
        if axis >= rank {
            return Err(dim_err(format!(
                "softmax: axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        let len = self.shape()[axis];
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut out = vec![0.0; self.numel()];
        kernels::softmax_lanes(self.data(), &mut out, outer, len, inner);
        Ok(make(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            BackOp::Softmax { outer, len, inner },
        ))
    }

    /// Bilinear upsampling by an integer factor (half-pixel centers, edge
    /// clamp).
    pub fn interpolate_bilinear(&self, scale: usize) -> Result<Tensor> {
        require_rank(self, 4, "interpolate_bilinear")?;
        if scale < 1 {
            return Err(Error::Contract(
                "interpolate_bilinear: scale factor must be >= 1".into(),
            ));
        }
        let s = self.shape().to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![0.0; b * c * h * scale * w * scale];
        kernels::bilinear_up(self.data(), b * c, h, w, scale, &mut out);
        Ok(make(
            out,
            vec![b, c, h * scale, w * scale],
            vec![self.clone()],
            BackOp::Bilinear { scale },
        ))
    }

    /// Channel slice `[c0, c1)` of an NCHW tensor.
    pub fn slice_channels(&self, c0: usize, c1: usize) -> Result<Tensor> {
        require_rank(self, 4, "slice_channels")?;
        let s = self.shape().to_vec();
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        if c0 >= c1 || c1 > c {
            return Err(dim_err(format!(
                "slice_channels: range [{c0}, {c1}) invalid for {c} channels"
            )));
        }
        let cs = c1 - c0;
        let mut out = vec![0.0; b * cs * hw];
        for bi in 0..b {
            out[bi * cs * hw..(bi + 1) * cs * hw]
                .copy_from_slice(&self.data()[(bi * c + c0) * hw..(bi * c + c1) * hw]);
        }
        Ok(make(out, vec![b, cs, s[2], s[3]], vec![self.clone()], BackOp::SliceC { c0 }))
    }

    /// `[B, C, H, W] → [B, H·W, C]` token view.
    pub fn nchw_to_tokens(&self) -> Result<Tensor> {
        require_rank(self, 4, "nchw_to_tokens")?;
        let s = self.shape().to_vec();
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            for ci in 0..c {
                for t in 0..hw {
                    out[(bi * hw + t) * c + ci] = x[(bi * c + ci) * hw + t];
                }
            }
        }
        Ok(make(out, vec![b, hw, c], vec![self.clone()], BackOp::NchwToTokens))
    }

    /// `[B, N, C] → [B, C, h, w]` map view (`N` must equal `h·w`).
    pub fn tokens_to_nchw(&self, h: usize, w: usize) -> Result<Tensor> {
        require_rank(self, 3, "tokens_to_nchw")?;
        let s = self.shape().to_vec();
        let (b, n, c) = (s[0], s[1], s[2]);
        if n != h * w {
            return Err(dim_err(format!(
                "tokens_to_nchw: {n} tokens cannot form a {h}x{w} map"
            )));
        }
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            for t in 0..n {
                for ci in 0..c {
                    out[(bi * c + ci) * n + t] = x[(bi * n + t) * c + ci];
                }
            }
        }
        Ok(make(out, vec![b, c, h, w], vec![self.clone()], BackOp::TokensToNchw))
    }

    /// Fold non-overlapping `r×r` patches into token features:
    /// `[B, C, H, W] → [B, (H/r)·(W/r), C·r²]`.
    pub fn space_to_patch(&self, r: usize) -> Result<Tensor> {
        require_rank(self, 4, "space_to_patch")?;
        let s = self.shape().to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if r < 1 || h % r != 0 || w % r != 0 {
            return Err(dim_err(format!(
                "space_to_patch: {h}x{w} map not divisible into {r}x{r} patches"
            )));
        }
        let (hp, wp) = (h / r, w / r);
        let fw = c * r * r;
        let x = self.data();
        let mut out = vec![0.0; b * hp * wp * fw];
        for bi in 0..b {
            for ph in 0..hp {
                for pw in 0..wp {
                    let t = ph * wp + pw;
                    let row = &mut out[(bi * hp * wp + t) * fw..(bi * hp * wp + t + 1) * fw];
                    for ci in 0..c {
                        for dy in 0..r {
                            for dx in 0..r {
                                row[ci * r * r + dy * r + dx] =
                                    x[((bi * c + ci) * h + ph * r + dy) * w + pw * r + dx];
                            }
                        }
                    }
                }
            }
        }
        Ok(make(out, vec![b, hp * wp, fw], vec![self.clone()], BackOp::SpaceToPatch { r }))
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum_all(&self) -> Tensor {
        let s: Elem = self.data().iter().sum();
        make(vec![s], Vec::new(), vec![self.clone()], BackOp::SumAll)
    }

    /// Mean of all elements (rank-0 result).
    pub fn mean_all(&self) -> Tensor {
        let s: Elem = self.data().iter().sum();
        make(
            vec![s / self.numel() as Elem],
            Vec::new(),
            vec![self.clone()],
            BackOp::MeanAll,
        )
    }
}

/// `x[..., din] · w[din, dout] + b[dout]`, applied along the last axis.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    require_rank(w, 2, "linear weight")?;
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let last = *x.shape().last().ok_or_else(|| dim_err("linear: scalar input".into()))?;
    if last != din {
        return Err(dim_err(format!(
            "linear: input shape {:?} does not end in weight rows {din}",
            x.shape()
        )));
    }
    let rows = x.numel() / din;
    let mut out = vec![0.0; rows * dout];
    kernels::matmul(x.data(), w.data(), &mut out, rows, din, dout);
    if let Some(b) = b {
        if b.shape() != [dout] {
            return Err(dim_err(format!(
                "linear: bias shape {:?} does not match output width {dout}",
                b.shape()
            )));
        }
        for r in 0..rows {
            for j in 0..dout {
                out[r * dout + j] += b.data()[j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    Ok(make(out, shape, parents, BackOp::Linear { rows }))
}

/// 2-D convolution over NCHW input with weight `[cout, cin, k, k]`.
/// The kernel must be square with odd extent.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    require_rank(x, 4, "conv2d input")?;
    require_rank(w, 4, "conv2d weight")?;
    let xs = x.shape().to_vec();
    let ws = w.shape().to_vec();
    if ws[2] != ws[3] {
        return Err(dim_err(format!("conv2d: non-square kernel {:?}", &ws[2..])));
    }
    let k = ws[2];
    if k % 2 == 0 {
        return Err(Error::Contract(format!(
            "conv2d: kernel extent must be odd, got {k}"
        )));
    }
    if stride < 1 {
        return Err(Error::Contract("conv2d: stride must be >= 1".into()));
    }
    if xs[1] != ws[1] {
        return Err(dim_err(format!(
            "conv2d: input channels {} (shape {:?}) do not match weight channels {} (shape {:?})",
            xs[1], xs, ws[1], ws
        )));
    }
    if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
        return Err(dim_err(format!(
            "conv2d: kernel {k} larger than padded input {}x{}",
            xs[2] + 2 * pad,
            xs[3] + 2 * pad
        )));
    }
    let s = ConvShape {
        batch: xs[0],
        cin: xs[1],
        h: xs[2],
        w: xs[3],
        cout: ws[0],
        k,
        stride,
        pad,
    };
    if let Some(b) = bias {
        if b.shape() != [s.cout] {
            return Err(dim_err(format!(
                "conv2d: bias shape {:?} does not match {} output channels",
                b.shape(),
                s.cout
            )));
        }
    }
    let (ho, wo) = s.out_hw();
    let mut out = vec![0.0; s.batch * s.cout * ho * wo];
    kernels::conv2d(x.data(), w.data(), bias.map(|b| b.data()), s, &mut out);
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(make(out, vec![s.batch, s.cout, ho, wo], parents, BackOp::Conv2d { s }))
}

/// Transposed 2-D convolution with weight `[cin, cout, k, k]`.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    require_rank(x, 4, "conv_transpose2d input")?;
    require_rank(w, 4, "conv_transpose2d weight")?;
    let xs = x.shape().to_vec();
    let ws = w.shape().to_vec();
    if ws[2] != ws[3] {
        return Err(dim_err(format!("conv_transpose2d: non-square kernel {:?}", &ws[2..])));
    }
    if xs[1] != ws[0] {
        return Err(dim_err(format!(
            "conv_transpose2d: input channels {} (shape {:?}) do not match weight rows {} \
             (shape {:?})",
            xs[1], xs, ws[0], ws
        )));
    }
    let s = ConvShape {
        batch: xs[0],
        cin: xs[1],
        h: xs[2],
        w: xs[3],
        cout: ws[1],
        k: ws[2],
        stride,
        pad,
    };
    if (xs[2] - 1) * stride + s.k <= 2 * pad || (xs[3] - 1) * stride + s.k <= 2 * pad {
        return Err(dim_err(format!(
            "conv_transpose2d: output collapses for input {}x{} k={} stride={stride} pad={pad}",
            xs[2], xs[3], s.k
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [s.cout] {
            return Err(dim_err(format!(
                "conv_transpose2d: bias shape {:?} does not match {} output channels",
                b.shape(),
                s.cout
            )));
        }
    }
    let (ho, wo) = s.tconv_out_hw();
    let mut out = vec![0.0; s.batch * s.cout * ho * wo];
    kernels::conv_transpose2d(x.data(), w.data(), bias.map(|b| b.data()), s, &mut out);
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(make(out, vec![s.batch, s.cout, ho, wo], parents, BackOp::ConvT2d { s }))
}

/// Concatenate NCHW tensors along the channel axis, in argument order.
pub fn concat_channels(xs: &[Tensor]) -> Result<Tensor> {
    if xs.is_empty() {
        return Err(dim_err("concat_channels: empty input list".into()));
    }
    require_rank(&xs[0], 4, "concat_channels input 0")?;
    let (b, h, w) = (xs[0].shape()[0], xs[0].shape()[2], xs[0].shape()[3]);
    let mut splits = Vec::with_capacity(xs.len());
    for (i, x) in xs.iter().enumerate() {
        require_rank(x, 4, &format!("concat_channels input {i}"))?;
        let s = x.shape();
        if s[0] != b || s[2] != h || s[3] != w {
            return Err(dim_err(format!(
                "concat_channels: input {i} has shape {:?}, expected [{b}, _, {h}, {w}]",
                s
            )));
        }
        splits.push(s[1]);
    }
    let ct: usize = splits.iter().sum();
    let hw = h * w;
    let mut out = vec![0.0; b * ct * hw];
    for bi in 0..b {
        let mut off = 0;
        for (x, &ci) in xs.iter().zip(&splits) {
            out[(bi * ct + off) * hw..(bi * ct + off + ci) * hw]
                .copy_from_slice(&x.data()[bi * ci * hw..(bi + 1) * ci * hw]);
            off += ci;
        }
    }
    Ok(make(out, vec![b, ct, h, w], xs.to_vec(), BackOp::ConcatC { splits }))
}

/// Layer normalization over the last axis with learnable `gamma`/`beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: Elem) -> Result<Tensor> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| dim_err("layer_norm: scalar input".into()))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(dim_err(format!(
            "layer_norm: gamma {:?} / beta {:?} do not match feature width {d}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let rows = x.numel() / d;
    let xd = x.data();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut out = vec![0.0; x.numel()];
    let mut means = vec![0.0; rows];
    let mut rstds = vec![0.0; rows];
    for r in 0..rows {
        let xr = &xd[r * d..(r + 1) * d];
        let mean = xr.iter().sum::<Elem>() / d as Elem;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<Elem>() / d as Elem;
        let rstd = 1.0 / (var + eps).sqrt();
        means[r] = mean;
        rstds[r] = rstd;
        for j in 0..d {
            out[r * d + j] = (xr[j] - mean) * rstd * gd[j] + bd[j];
        }
    }
    Ok(make(
        out,
        x.shape().to_vec(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        BackOp::LayerNorm { mean: means, rstd: rstds },
    ))
}

/// Training-mode batch normalization over NCHW input. Returns the output
/// plus the per-channel batch mean and biased variance so the caller can
/// maintain running statistics.
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: Elem,
) -> Result<(Tensor, Vec<Elem>, Vec<Elem>)> {
    require_rank(x, 4, "batch_norm input")?;
    let s = x.shape().to_vec();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(dim_err(format!(
            "batch_norm: gamma {:?} / beta {:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    let n = (b * hw) as Elem;
    let xd = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut sum = 0.0;
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for i in 0..hw {
                sum += xd[base + i];
            }
        }
        mean[ci] = sum / n;
        let mut sq = 0.0;
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for i in 0..hw {
                let d = xd[base + i] - mean[ci];
                sq += d * d;
            }
        }
        var[ci] = sq / n;
    }
    let rstd: Vec<Elem> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut out = vec![0.0; xd.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            for i in 0..hw {
                out[base + i] = (xd[base + i] - mean[ci]) * rstd[ci] * gd[ci] + bd[ci];
            }
        }
    }
    let t = make(
        out,
        s,
        vec![x.clone(), gamma.clone(), beta.clone()],
        BackOp::BnTrain { mean: mean.clone(), rstd },
    );
    Ok((t, mean, var))
}

/// Inference-mode batch normalization using running statistics.
pub fn batch_norm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[Elem],
    running_var: &[Elem],
    eps: Elem,
) -> Result<Tensor> {
    require_rank(x, 4, "batch_norm input")?;
    let s = x.shape().to_vec();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    if gamma.shape() != [c] || beta.shape() != [c] || running_mean.len() != c || running_var.len() != c
    {
        return Err(dim_err(format!(
            "batch_norm: parameter widths do not match {c} channels"
        )));
    }
    let rstd: Vec<Elem> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let xd = x.data();
    let (gd, bd) = (gamma.data(), beta.data());
    let mut out = vec![0.0; xd.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            for i in 0..hw {
                out[base + i] = (xd[base + i] - running_mean[ci]) * rstd[ci] * gd[ci] + bd[ci];
            }
        }
    }
    Ok(make(
        out,
        s,
        vec![x.clone(), gamma.clone(), beta.clone()],
        BackOp::BnEval { rm: running_mean.to_vec(), rstd },
    ))
}

/// Multi-head scaled dot-product attention over token sequences.
///
/// `q_src` is `[B, Nq, C]`, `kv_src` is `[B, Nk, C]` (pass the same tensor
/// twice for self-attention); the four projections are bias-free `[C, C]`
/// matrices whose column blocks hold the per-head projections. Under
/// `no_grad` the score matrix is never materialized.
pub fn attention(
    q_src: &Tensor,
    kv_src: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    heads: usize,
) -> Result<Tensor> {
    require_rank(q_src, 3, "attention q_src")?;
    require_rank(kv_src, 3, "attention kv_src")?;
    let (b, nq, c) = (q_src.shape()[0], q_src.shape()[1], q_src.shape()[2]);
    let (bk, nk, ck) = (kv_src.shape()[0], kv_src.shape()[1], kv_src.shape()[2]);
    if b != bk || c != ck {
        return Err(dim_err(format!(
            "attention: q_src {:?} and kv_src {:?} disagree on batch or width",
            q_src.shape(),
            kv_src.shape()
        )));
    }
    for (w, name) in [(wq, "wq"), (wk, "wk"), (wv, "wv"), (wo, "wo")] {
        if w.shape() != [c, c] {
            return Err(dim_err(format!(
                "attention: {name} shape {:?}, expected [{c}, {c}]",
                w.shape()
            )));
        }
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!(
            "attention: {heads} heads do not divide model width {c}"
        )));
    }
    let dk = c / heads;
    let scale = 1.0 / (dk as Elem).sqrt();
    let rows_q = b * nq;
    let rows_k = b * nk;

    let mut q = vec![0.0; rows_q * c];
    kernels::matmul(q_src.data(), wq.data(), &mut q, rows_q, c, c);
    let mut k = vec![0.0; rows_k * c];
    kernels::matmul(kv_src.data(), wk.data(), &mut k, rows_k, c, c);
    let mut v = vec![0.0; rows_k * c];
    kernels::matmul(kv_src.data(), wv.data(), &mut v, rows_k, c, c);

    let parents = [q_src, kv_src, wq, wk, wv, wo];
    let tracking = track(&parents);
    let mut o = vec![0.0; rows_q * c];
    let mut probs = if tracking { vec![0.0; b * heads * nq * nk] } else { Vec::new() };
    let mut qh = vec![0.0; nq * dk];
    let mut kh = vec![0.0; nk * dk];
    let mut vh = vec![0.0; nk * dk];
    let mut oh = vec![0.0; nq * dk];
    for bi in 0..b {
        let q_b = &q[bi * nq * c..(bi + 1) * nq * c];
        let k_b = &k[bi * nk * c..(bi + 1) * nk * c];
        let v_b = &v[bi * nk * c..(bi + 1) * nk * c];
        for h in 0..heads {
            gather_cols(q_b, nq, c, h * dk, dk, &mut qh);
            gather_cols(k_b, nk, c, h * dk, dk, &mut kh);
            gather_cols(v_b, nk, c, h * dk, dk, &mut vh);
            if tracking {
                let p = &mut probs[(bi * heads + h) * nq * nk..(bi * heads + h + 1) * nq * nk];
                kernels::matmul_nt(&qh, &kh, p, nq, dk, nk);
                for s in p.iter_mut() {
                    *s *= scale;
                }
                kernels::softmax_rows_inplace(p, nk);
                kernels::matmul(p, &vh, &mut oh, nq, nk, dk);
            } else {
                kernels::attn_stream(&qh, &kh, &vh, nq, nk, dk, scale, &mut oh);
            }
            let o_b = &mut o[bi * nq * c..(bi + 1) * nq * c];
            scatter_cols(&oh, nq, c, h * dk, dk, o_b);
        }
    }
    let mut y = vec![0.0; rows_q * c];
    kernels::matmul(&o, wo.data(), &mut y, rows_q, c, c);

    Ok(make(
        y,
        vec![b, nq, c],
        vec![
            q_src.clone(),
            kv_src.clone(),
            wq.clone(),
            wk.clone(),
            wv.clone(),
            wo.clone(),
        ],
        BackOp::Attention(Box::new(AttnCtx {
            heads,
            scale,
            batch: b,
            nq,
            nk,
            c,
            q,
            k,
            v,
            probs,
            o,
        })),
    ))
}

/// Mean pixel-wise cross-entropy between raw logits `[B, C, H, W]` and
/// integer labels (length `B·H·W`, row-major).
pub(crate) fn cross_entropy_op(logits: &Tensor, labels: &[u8]) -> Result<Tensor> {
    require_rank(logits, 4, "cross_entropy logits")?;
    let s = logits.shape().to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    if labels.len() != b * hw {
        return Err(dim_err(format!(
            "cross_entropy: {} labels for {}x{}x{} pixels",
            labels.len(),
            b,
            h,
            w
        )));
    }
    if c > u8::MAX as usize + 1 {
        return Err(Error::Config(format!("cross_entropy: {c} classes exceed label range")));
    }
    let xd = logits.data();
    let mut probs = vec![0.0; xd.len()];
    let mut total = 0.0;
    for bi in 0..b {
        for pos in 0..hw {
            let lab = labels[bi * hw + pos] as usize;
            if lab >= c {
                return Err(Error::Contract(format!(
                    "cross_entropy: label {lab} out of range for {c} classes at pixel \
                     (b={bi}, y={}, x={})",
                    pos / w,
                    pos % w
                )));
            }
            let mut max = Elem::NEG_INFINITY;
            for ci in 0..c {
                max = max.max(xd[(bi * c + ci) * hw + pos]);
            }
            let mut sum = 0.0;
            for ci in 0..c {
                let e = (xd[(bi * c + ci) * hw + pos] - max).exp();
                probs[(bi * c + ci) * hw + pos] = e;
                sum += e;
            }
            for ci in 0..c {
                probs[(bi * c + ci) * hw + pos] /= sum;
            }
            let lse = max + sum.ln();
            total += lse - xd[(bi * c + lab) * hw + pos];
        }
    }
    let loss = total / (b * hw) as Elem;
    Ok(make(
        vec![loss],
        Vec::new(),
        vec![logits.clone()],
        BackOp::CrossEntropy { labels: Rc::new(labels.to_vec()), probs },
    ))
}

/// Per-class soft Tversky counts `(TP, FP, FN)` pooled over the whole batch.
pub(crate) fn tversky_soft_counts(
    probs: &[Elem],
    target: &[Elem],
    b: usize,
    c: usize,
    hw: usize,
) -> (Vec<Elem>, Vec<Elem>, Vec<Elem>) {
    let mut tp = vec![0.0; c];
    let mut fp = vec![0.0; c];
    let mut fne = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            for i in 0..hw {
                let p = probs[base + i];
                if target[base + i] > 0.5 {
                    tp[ci] += p;
                    fne[ci] += 1.0 - p;
                } else {
                    fp[ci] += p;
                }
            }
        }
    }
    (tp, fp, fne)
}

/// Soft Tversky loss `1 − mean_c index_c` over probabilities `[B, C, H, W]`
/// and a one-hot target of the same shape. Gradients flow to `probs` only.
pub(crate) fn tversky_op(
    probs: &Tensor,
    target: &Tensor,
    alpha: Elem,
    beta: Elem,
    eps: Elem,
) -> Result<Tensor> {
    require_rank(probs, 4, "tversky probs")?;
    if probs.shape() != target.shape() {
        return Err(dim_err(format!(
            "tversky: probs {:?} and target {:?} differ",
            probs.shape(),
            target.shape()
        )));
    }
    let s = probs.shape().to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    const TOL: Elem = 1e-6;
    let pd = probs.data();
    let td = target.data();
    for (i, &p) in pd.iter().enumerate() {
        if !(-TOL..=1.0 + TOL).contains(&p) {
            return Err(Error::Contract(format!(
                "tversky: probability {p} at flat index {i} outside [0, 1]"
            )));
        }
    }
    for bi in 0..b {
        for pos in 0..hw {
            let mut sum = 0.0;
            for ci in 0..c {
                let t = td[(bi * c + ci) * hw + pos];
                if (t - 0.0).abs() > TOL && (t - 1.0).abs() > TOL {
                    return Err(Error::Contract(format!(
                        "tversky: target value {t} at (b={bi}, c={ci}) is not one-hot"
                    )));
                }
                sum += t;
            }
            if (sum - 1.0).abs() > TOL {
                return Err(Error::Contract(format!(
                    "tversky: target channel sum {sum} at (b={bi}, y={}, x={}) is not 1",
                    pos / w,
                    pos % w
                )));
            }
        }
    }
    let (tp, fp, fne) = tversky_soft_counts(pd, td, b, c, hw);
    let mut num = vec![0.0; c];
    let mut den = vec![0.0; c];
    let mut mean_index = 0.0;
    for ci in 0..c {
        num[ci] = tp[ci] + eps;
        den[ci] = tp[ci] + alpha * fp[ci] + beta * fne[ci] + eps;
        mean_index += num[ci] / den[ci];
    }
    mean_index /= c as Elem;
    Ok(make(
        vec![1.0 - mean_index],
        Vec::new(),
        vec![probs.clone()],
        BackOp::Tversky(Box::new(TverskyCtx {
            alpha,
            beta,
            target: Rc::new(td.to_vec()),
            num,
            den,
        })),
    ))
}
