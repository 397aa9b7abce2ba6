//! Low-level compute kernels behind the tensor ops.
//!
//! All kernels read `S`, accumulate in `f64`, and write back `S`.
//! Parallel loops split work along sample or row boundaries that do not
//! depend on thread count, and every reduction runs in a fixed order, so
//! results are bitwise reproducible run to run.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Below this many multiply-adds a kernel runs serially; rayon dispatch
/// costs more than it saves.
const PAR_FLOP_THRESHOLD: usize = 1 << 18;

// ---------------------------------------------------------------------------
// GEMM
// ---------------------------------------------------------------------------

/// c[m,n] = a[m,k] * b[k,n]
pub fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |i: usize, c_row: &mut [S]| {
        let mut acc = vec![0.0f64; n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            let av = av.as_f64();
            let b_row = &b[kk * n..(kk + 1) * n];
            for (ac, &bv) in acc.iter_mut().zip(b_row) {
                *ac += av * bv.as_f64();
            }
        }
        for (o, &ac) in c_row.iter_mut().zip(acc.iter()) {
            *o = S::of_f64(ac);
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, c_row)| row(i, c_row));
    } else {
        for (i, c_row) in c.chunks_mut(n).enumerate() {
            row(i, c_row);
        }
    }
}

/// c[m,n] = a[m,k] * b[n,k]^T  (both operands row-contiguous dot products)
pub fn gemm_nt<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let row = |i: usize, c_row: &mut [S]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *o = S::of_f64(dot_f64(a_row, b_row));
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, c_row)| row(i, c_row));
    } else {
        for (i, c_row) in c.chunks_mut(n).enumerate() {
            row(i, c_row);
        }
    }
}

/// c[m,n] = a[p,m]^T * b[p,n]
pub fn gemm_tn<S: Scalar>(p: usize, m: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), p * m);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |i: usize, c_row: &mut [S]| {
        let mut acc = vec![0.0f64; n];
        for bb in 0..p {
            let av = a[bb * m + i].as_f64();
            let b_row = &b[bb * n..(bb + 1) * n];
            for (ac, &bv) in acc.iter_mut().zip(b_row) {
                *ac += av * bv.as_f64();
            }
        }
        for (o, &ac) in c_row.iter_mut().zip(acc.iter()) {
            *o = S::of_f64(ac);
        }
    };
    if p * m * n >= PAR_FLOP_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, c_row)| row(i, c_row));
    } else {
        for (i, c_row) in c.chunks_mut(n).enumerate() {
            row(i, c_row);
        }
    }
}

/// Dot product with a fixed 8-lane reassociation so the f64 accumulation
/// vectorizes while staying order-deterministic.
#[inline]
fn dot_f64<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    let mut lanes = [0.0f64; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let ac = &a[c * 8..c * 8 + 8];
        let bc = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            lanes[l] += ac[l].as_f64() * bc[l].as_f64();
        }
    }
    let mut tail = 0.0f64;
    for i in chunks * 8..a.len() {
        tail += a[i].as_f64() * b[i].as_f64();
    }
    let head = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    head + tail
}

// ---------------------------------------------------------------------------
// Convolution geometry and im2col/col2im
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn fits(&self) -> bool {
        self.height + 2 * self.pad >= self.kernel && self.width + 2 * self.pad >= self.kernel
    }
    /// Rows of the unrolled column matrix: C * k * k.
    pub fn ckk(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
    /// Columns of the unrolled column matrix: out_h * out_w.
    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unroll one sample `img[C,H,W]` into `cols[C*k*k, OH*OW]`.
pub fn im2col<S: Scalar>(img: &[S], g: &ConvGeom, cols: &mut [S]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    debug_assert_eq!(cols.len(), g.ckk() * oh * ow);
    debug_assert_eq!(img.len(), g.channels * g.height * g.width);
    let mut r = 0;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ku in 0..g.kernel {
            for kv in 0..g.kernel {
                let dst = &mut cols[r * oh * ow..(r + 1) * oh * ow];
                let mut idx = 0;
                for oy in 0..oh {
                    let y = (oy * g.stride + ku) as isize - g.pad as isize;
                    if y < 0 || y >= g.height as isize {
                        for _ in 0..ow {
                            dst[idx] = S::zero();
                            idx += 1;
                        }
                        continue;
                    }
                    let src_row = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..ow {
                        let x = (ox * g.stride + kv) as isize - g.pad as isize;
                        dst[idx] = if x < 0 || x >= g.width as isize {
                            S::zero()
                        } else {
                            src_row[x as usize]
                        };
                        idx += 1;
                    }
                }
                r += 1;
            }
        }
    }
}

/// Scatter-add `cols[C*k*k, OH*OW]` back into one sample `img[C,H,W]`.
pub fn col2im<S: Scalar>(cols: &[S], g: &ConvGeom, img: &mut [S]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    debug_assert_eq!(cols.len(), g.ckk() * oh * ow);
    debug_assert_eq!(img.len(), g.channels * g.height * g.width);
    for v in img.iter_mut() {
        *v = S::zero();
    }
    let mut r = 0;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ku in 0..g.kernel {
            for kv in 0..g.kernel {
                let src = &cols[r * oh * ow..(r + 1) * oh * ow];
                let mut idx = 0;
                for oy in 0..oh {
                    let y = (oy * g.stride + ku) as isize - g.pad as isize;
                    if y < 0 || y >= g.height as isize {
                        idx += ow;
                        continue;
                    }
                    let dst_row = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..ow {
                        let x = (ox * g.stride + kv) as isize - g.pad as isize;
                        if x >= 0 && x < g.width as isize {
                            dst_row[x as usize] += src[idx];
                        }
                        idx += 1;
                    }
                }
                r += 1;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Batched convolution drivers
// ---------------------------------------------------------------------------

/// Forward conv: x[B,C,H,W], kernel[O,C,k,k] -> out[B,O,OH,OW].
pub fn conv2d_fwd<S: Scalar>(
    batch: usize,
    x: &[S],
    kernel: &[S],
    bias: Option<&[S]>,
    out_ch: usize,
    g: &ConvGeom,
    out: &mut [S],
) {
    let in_len = g.channels * g.height * g.width;
    let pos = g.positions();
    let ckk = g.ckk();
    let out_len = out_ch * pos;
    out.par_chunks_mut(out_len)
        .enumerate()
        .for_each(|(b, out_s)| {
            let mut cols = vec![S::zero(); ckk * pos];
            im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
            gemm_nn(out_ch, ckk, pos, kernel, &cols, out_s);
            if let Some(bias) = bias {
                for (o, row) in out_s.chunks_mut(pos).enumerate() {
                    let bv = bias[o];
                    for v in row.iter_mut() {
                        *v += bv;
                    }
                }
            }
        });
    let _ = batch;
}

/// Input gradient of conv2d; also the forward pass of conv2d_transpose with
/// kernel layout [I,O,k,k] viewed as the conv kernel of the adjoint map.
pub fn conv2d_bwd_input<S: Scalar>(
    batch: usize,
    d_out: &[S],
    kernel: &[S],
    out_ch: usize,
    g: &ConvGeom,
    d_x: &mut [S],
) {
    let in_len = g.channels * g.height * g.width;
    let pos = g.positions();
    let ckk = g.ckk();
    let out_len = out_ch * pos;
    d_x.par_chunks_mut(in_len)
        .enumerate()
        .for_each(|(b, dx_s)| {
            let mut d_cols = vec![S::zero(); ckk * pos];
            // d_cols = kernel^T(O,CKK) * d_out_s
            gemm_tn(
                out_ch,
                ckk,
                pos,
                kernel,
                &d_out[b * out_len..(b + 1) * out_len],
                &mut d_cols,
            );
            col2im(&d_cols, g, dx_s);
        });
    let _ = batch;
}

/// Kernel gradient of conv2d: d_k[O,C*k*k] = sum_b d_out_b * cols_b^T,
/// accumulated over fixed 8-sample chunks so the reduce order is stable.
pub fn conv2d_bwd_kernel<S: Scalar>(
    batch: usize,
    d_out: &[S],
    x: &[S],
    out_ch: usize,
    g: &ConvGeom,
    d_kernel: &mut [S],
) {
    let in_len = g.channels * g.height * g.width;
    let pos = g.positions();
    let ckk = g.ckk();
    let out_len = out_ch * pos;
    let klen = out_ch * ckk;
    let chunks: Vec<Vec<f64>> = (0..batch)
        .collect::<Vec<_>>()
        .par_chunks(8)
        .map(|bs| {
            let mut acc = vec![0.0f64; klen];
            let mut cols = vec![S::zero(); ckk * pos];
            let mut partial = vec![S::zero(); klen];
            for &b in bs {
                im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
                gemm_nt(
                    out_ch,
                    pos,
                    ckk,
                    &d_out[b * out_len..(b + 1) * out_len],
                    &cols,
                    &mut partial,
                );
                for (a, &p) in acc.iter_mut().zip(partial.iter()) {
                    *a += p.as_f64();
                }
            }
            acc
        })
        .collect();
    let mut total = vec![0.0f64; klen];
    for c in &chunks {
        for (t, &v) in total.iter_mut().zip(c.iter()) {
            *t += v;
        }
    }
    for (o, &t) in d_kernel.iter_mut().zip(total.iter()) {
        *o = S::of_f64(t);
    }
}

/// Bias gradient: d_b[o] = sum over batch and positions of d_out[b,o,...].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_bias<S: Scalar>(
    batch: usize,
    d_out: &[S],
    out_ch: usize,
    pos: usize,
    d_bias: &mut [S],
) {
    for (o, db) in d_bias.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for b in 0..batch {
            let row = &d_out[(b * out_ch + o) * pos..(b * out_ch + o + 1) * pos];
            for &v in row {
                acc += v.as_f64();
            }
        }
        *db = S::of_f64(acc);
    }
}

// ---------------------------------------------------------------------------
// Max pooling
// ---------------------------------------------------------------------------

/// x[B,C,H,W] -> out[B,C,H/s,W/s] taking the max over each window; the
/// first maximal element wins ties (fixed scan order).
#[allow(clippy::too_many_arguments)]
pub fn maxpool2d_fwd<S: Scalar>(
    batch: usize,
    x: &[S],
    channels: usize,
    height: usize,
    width: usize,
    window: usize,
    stride: usize,
    out: &mut [S],
) {
    let oh = (height - window) / stride + 1;
    let ow = (width - window) / stride + 1;
    let in_len = channels * height * width;
    let out_len = channels * oh * ow;
    out.par_chunks_mut(out_len)
        .enumerate()
        .for_each(|(b, out_s)| {
            let xs = &x[b * in_len..(b + 1) * in_len];
            let mut idx = 0;
            for c in 0..channels {
                let plane = &xs[c * height * width..(c + 1) * height * width];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = plane[oy * stride * width + ox * stride];
                        for u in 0..window {
                            for v in 0..window {
                                let cand = plane[(oy * stride + u) * width + ox * stride + v];
                                if cand > best {
                                    best = cand;
                                }
                            }
                        }
                        out_s[idx] = best;
                        idx += 1;
                    }
                }
            }
        });
    let _ = batch;
}

/// Routes each output gradient to the first maximal input of its window.
#[allow(clippy::too_many_arguments)]
pub fn maxpool2d_bwd<S: Scalar>(
    batch: usize,
    x: &[S],
    d_out: &[S],
    channels: usize,
    height: usize,
    width: usize,
    window: usize,
    stride: usize,
    d_x: &mut [S],
) {
    let oh = (height - window) / stride + 1;
    let ow = (width - window) / stride + 1;
    let in_len = channels * height * width;
    let out_len = channels * oh * ow;
    d_x.par_chunks_mut(in_len)
        .enumerate()
        .for_each(|(b, dx_s)| {
            for v in dx_s.iter_mut() {
                *v = S::zero();
            }
            let xs = &x[b * in_len..(b + 1) * in_len];
            let gs = &d_out[b * out_len..(b + 1) * out_len];
            let mut idx = 0;
            for c in 0..channels {
                let plane = &xs[c * height * width..(c + 1) * height * width];
                let d_plane = &mut dx_s[c * height * width..(c + 1) * height * width];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = plane[oy * stride * width + ox * stride];
                        let mut best_at = (0, 0);
                        for u in 0..window {
                            for v in 0..window {
                                let cand = plane[(oy * stride + u) * width + ox * stride + v];
                                if cand > best {
                                    best = cand;
                                    best_at = (u, v);
                                }
                            }
                        }
                        let at = (oy * stride + best_at.0) * width + ox * stride + best_at.1;
                        d_plane[at] += gs[idx];
                        idx += 1;
                    }
                }
            }
        });
    let _ = batch;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Per-feature mean and biased variance. For rank-2 input each column is a
/// feature (reduce over rows); for rank-4 each channel is a feature (reduce
/// over batch and spatial dims).
pub fn bn_stats<S: Scalar>(
    x: &[S],
    features: usize,
    group: usize,
    inner: usize,
) -> (Vec<f64>, Vec<f64>) {
    // x viewed as [group, features, inner]
    let mut mean = vec![0.0f64; features];
    let mut var = vec![0.0f64; features];
    let n = (group * inner) as f64;
    mean.par_iter_mut()
        .zip(var.par_iter_mut())
        .enumerate()
        .for_each(|(f, (m, v))| {
            let mut s = 0.0f64;
            for g in 0..group {
                let row = &x[(g * features + f) * inner..(g * features + f + 1) * inner];
                for &xv in row {
                    s += xv.as_f64();
                }
            }
            let mu = s / n;
            let mut sq = 0.0f64;
            for g in 0..group {
                let row = &x[(g * features + f) * inner..(g * features + f + 1) * inner];
                for &xv in row {
                    let d = xv.as_f64() - mu;
                    sq += d * d;
                }
            }
            *m = mu;
            *v = sq / n;
        });
    (mean, var)
}

/// y = gamma * (x - mean) / sqrt(var + eps) + beta over [group, features, inner].
#[allow(clippy::too_many_arguments)]
pub fn bn_apply<S: Scalar>(
    x: &[S],
    features: usize,
    _group: usize,
    inner: usize,
    mean: &[f64],
    var: &[f64],
    gamma: &[S],
    beta: &[S],
    eps: f64,
    out: &mut [S],
) {
    out.par_chunks_mut(features * inner)
        .enumerate()
        .for_each(|(g, out_g)| {
            for f in 0..features {
                let inv = 1.0 / (var[f] + eps).sqrt();
                let ga = gamma[f].as_f64();
                let be = beta[f].as_f64();
                let mu = mean[f];
                let src = &x[(g * features + f) * inner..(g * features + f + 1) * inner];
                let dst = &mut out_g[f * inner..(f + 1) * inner];
                for (o, &xv) in dst.iter_mut().zip(src) {
                    *o = S::of_f64((xv.as_f64() - mu) * inv * ga + be);
                }
            }
        });
}
