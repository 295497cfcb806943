//! Forward and backward kernels for the supported layer set.
//!
//! All kernels are plain slice loops arranged so the inner loop runs over
//! contiguous rows (LLVM vectorizes these with FMA under
//! `target-cpu=native`). Accumulation order is fixed, so results are
//! bit-reproducible run to run.

use super::tensor::Scalar;

#[inline]
fn axpy<T: Scalar>(out: &mut [T], a: T, x: &[T]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = *o + a * v;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        acc = acc + x * y;
    }
    acc
}

// ---------------------------------------------------------------------------
// Dense: y = W x + b, W is [out, in]
// ---------------------------------------------------------------------------

pub fn dense_fwd<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, n_out: usize, n_in: usize, y: &mut [T]) {
    for o in 0..n_out {
        let row = &w[o * n_in..(o + 1) * n_in];
        let mut acc = dot(row, x);
        if let Some(b) = b {
            acc = acc + b[o];
        }
        y[o] = acc;
    }
}

pub fn dense_bwd<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    n_out: usize,
    n_in: usize,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(dx) = dx {
        for o in 0..n_out {
            axpy(dx, dy[o], &w[o * n_in..(o + 1) * n_in]);
        }
    }
    if let Some(dw) = dw {
        for o in 0..n_out {
            axpy(&mut dw[o * n_in..(o + 1) * n_in], dy[o], x);
        }
    }
    if let Some(db) = db {
        for o in 0..n_out {
            db[o] = db[o] + dy[o];
        }
    }
}

// ---------------------------------------------------------------------------
// Conv2d: stride 1, zero padding k/2, x [IC,H,W], w [OC,IC,K,K], y [OC,H,W]
// ---------------------------------------------------------------------------

/// Copy planes into a zero-padded buffer [C, H+2p, W+2p] so the kernel
/// loops need no edge branches.
fn pad_planes<T: Scalar>(x: &[T], c: usize, h: usize, wd: usize, pad: usize) -> Vec<T> {
    let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
    let mut out = vec![T::zero(); c * ph * pw];
    for ch in 0..c {
        for row in 0..h {
            let src = &x[ch * h * wd + row * wd..ch * h * wd + (row + 1) * wd];
            let dst_off = ch * ph * pw + (row + pad) * pw + pad;
            out[dst_off..dst_off + wd].copy_from_slice(src);
        }
    }
    out
}

/// Accumulate one 3-tap row: acc[x] += w0 s[x] + w1 s[x+1] + w2 s[x+2].
#[inline]
fn fma_row3<T: Scalar>(acc: &mut [T], prow: &[T], w0: T, w1: T, w2: T) {
    let wd = acc.len();
    let s0 = &prow[..wd];
    let s1 = &prow[1..1 + wd];
    let s2 = &prow[2..2 + wd];
    for x in 0..wd {
        acc[x] = acc[x] + w0 * s0[x] + w1 * s1[x] + w2 * s2[x];
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd<T: Scalar>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    ic: usize,
    h: usize,
    wd: usize,
    oc: usize,
    k: usize,
    y: &mut [T],
) {
    let pad = k / 2;
    let plane = h * wd;
    let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
    let padded = pad_planes(x, ic, h, wd, pad);
    let mut acc = vec![T::zero(); wd];
    for o in 0..oc {
        let bias = b.map(|b| b[o]).unwrap_or_else(T::zero);
        for row in 0..h {
            acc.iter_mut().for_each(|v| *v = bias);
            for i in 0..ic {
                let wbase = ((o * ic + i) * k) * k;
                if k == 3 {
                    for ky in 0..3 {
                        let base = i * ph * pw + (row + ky) * pw;
                        fma_row3(
                            &mut acc,
                            &padded[base..base + pw],
                            w[wbase + ky * 3],
                            w[wbase + ky * 3 + 1],
                            w[wbase + ky * 3 + 2],
                        );
                    }
                } else {
                    for ky in 0..k {
                        let base = i * ph * pw + (row + ky) * pw;
                        let prow = &padded[base..base + pw];
                        for kx in 0..k {
                            let wv = w[wbase + ky * k + kx];
                            let src = &prow[kx..kx + wd];
                            for (a, &v) in acc.iter_mut().zip(src) {
                                *a = *a + wv * v;
                            }
                        }
                    }
                }
            }
            y[o * plane + row * wd..o * plane + (row + 1) * wd].copy_from_slice(&acc);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd<T: Scalar>(
    x: &[T],
    w: &[T],
    dy_out: &[T],
    ic: usize,
    h: usize,
    wd: usize,
    oc: usize,
    k: usize,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let pad = k / 2;
    let plane = h * wd;
    let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
    if let Some(dx) = dx {
        // dIn = correlation of dOut with the kernel flipped in both axes
        // and oc/ic transposed; pad dOut to drop edge handling.
        let padded = pad_planes(dy_out, oc, h, wd, pad);
        let mut acc = vec![T::zero(); wd];
        for i in 0..ic {
            for row in 0..h {
                acc.iter_mut().for_each(|v| *v = T::zero());
                for o in 0..oc {
                    let wbase = ((o * ic + i) * k) * k;
                    if k == 3 {
                        for ky in 0..3 {
                            let base = o * ph * pw + (row + ky) * pw;
                            fma_row3(
                                &mut acc,
                                &padded[base..base + pw],
                                w[wbase + (2 - ky) * 3 + 2],
                                w[wbase + (2 - ky) * 3 + 1],
                                w[wbase + (2 - ky) * 3],
                            );
                        }
                    } else {
                        for ky in 0..k {
                            let prow = &padded
                                [o * ph * pw + (row + ky) * pw..o * ph * pw + (row + ky + 1) * pw];
                            for kx in 0..k {
                                let wv = w[wbase + (k - 1 - ky) * k + (k - 1 - kx)];
                                let src = &prow[kx..kx + wd];
                                for (a, &v) in acc.iter_mut().zip(src) {
                                    *a = *a + wv * v;
                                }
                            }
                        }
                    }
                }
                let dst = &mut dx[i * plane + row * wd..i * plane + (row + 1) * wd];
                for (d, &a) in dst.iter_mut().zip(&acc) {
                    *d = *d + a;
                }
            }
        }
    }
    if let Some(dw) = dw {
        let padded = pad_planes(x, ic, h, wd, pad);
        for o in 0..oc {
            for i in 0..ic {
                let wbase = ((o * ic + i) * k) * k;
                if k == 3 {
                    for ky in 0..3 {
                        let (mut a0, mut a1, mut a2) = (T::zero(), T::zero(), T::zero());
                        for row in 0..h {
                            let dout_row =
                                &dy_out[o * plane + row * wd..o * plane + (row + 1) * wd];
                            let base = i * ph * pw + (row + ky) * pw;
                            let p0 = &padded[base..base + wd];
                            let p1 = &padded[base + 1..base + 1 + wd];
                            let p2 = &padded[base + 2..base + 2 + wd];
                            for x in 0..wd {
                                let d = dout_row[x];
                                a0 = a0 + d * p0[x];
                                a1 = a1 + d * p1[x];
                                a2 = a2 + d * p2[x];
                            }
                        }
                        dw[wbase + ky * 3] = dw[wbase + ky * 3] + a0;
                        dw[wbase + ky * 3 + 1] = dw[wbase + ky * 3 + 1] + a1;
                        dw[wbase + ky * 3 + 2] = dw[wbase + ky * 3 + 2] + a2;
                    }
                } else {
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = T::zero();
                            for row in 0..h {
                                let dout_row =
                                    &dy_out[o * plane + row * wd..o * plane + (row + 1) * wd];
                                let in_off = i * ph * pw + (row + ky) * pw + kx;
                                acc = acc + dot(dout_row, &padded[in_off..in_off + wd]);
                            }
                            dw[wbase + ky * k + kx] = dw[wbase + ky * k + kx] + acc;
                        }
                    }
                }
            }
        }
    }
    if let Some(db) = db {
        for o in 0..oc {
            let dout_plane = &dy_out[o * plane..(o + 1) * plane];
            let mut acc = T::zero();
            for &v in dout_plane {
                acc = acc + v;
            }
            db[o] = db[o] + acc;
        }
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu_fwd<T: Scalar>(x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x.iter()) {
        *o = v * sigmoid(v);
    }
}

pub fn silu_bwd<T: Scalar>(x: &[T], dy: &[T], dx: &mut [T]) {
    for ((d, &v), &g) in dx.iter_mut().zip(x.iter()).zip(dy.iter()) {
        let s = sigmoid(v);
        *d = *d + g * s * (T::one() + v * (T::one() - s));
    }
}

pub fn relu_fwd<T: Scalar>(x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x.iter()) {
        *o = if v > T::zero() { v } else { T::zero() };
    }
}

pub fn relu_bwd<T: Scalar>(x: &[T], dy: &[T], dx: &mut [T]) {
    for ((d, &v), &g) in dx.iter_mut().zip(x.iter()).zip(dy.iter()) {
        if v > T::zero() {
            *d = *d + g;
        }
    }
}

// ---------------------------------------------------------------------------
// Group normalization over [C, spatial]; per-channel affine.
// ---------------------------------------------------------------------------

pub struct GroupNormAux<T> {
    /// (mean, inv_std) per group.
    pub stats: Vec<(T, T)>,
}

pub fn group_norm_fwd<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    channels: usize,
    spatial: usize,
    groups: usize,
    eps: T,
    y: &mut [T],
) -> GroupNormAux<T> {
    let cg = channels / groups;
    let group_len = cg * spatial;
    let mut stats = Vec::with_capacity(groups);
    for g in 0..groups {
        let seg = &x[g * group_len..(g + 1) * group_len];
        let n = T::from_f64(group_len as f64);
        let mut sum = T::zero();
        for &v in seg {
            sum = sum + v;
        }
        let mean = sum / n;
        let mut var = T::zero();
        for &v in seg {
            let d = v - mean;
            var = var + d * d;
        }
        var = var / n;
        let inv = T::one() / (var + eps).sqrt();
        stats.push((mean, inv));
        for c in 0..cg {
            let ch = g * cg + c;
            let (gm, bt) = (gamma[ch], beta[ch]);
            let src = &seg[c * spatial..(c + 1) * spatial];
            let dst = &mut y[ch * spatial..(ch + 1) * spatial];
            for (o, &v) in dst.iter_mut().zip(src.iter()) {
                *o = gm * (v - mean) * inv + bt;
            }
        }
    }
    GroupNormAux { stats }
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_bwd<T: Scalar>(
    x: &[T],
    gamma: &[T],
    aux: &GroupNormAux<T>,
    dy: &[T],
    channels: usize,
    spatial: usize,
    groups: usize,
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let cg = channels / groups;
    let group_len = cg * spatial;
    let mut dgamma = dgamma;
    let mut dbeta = dbeta;
    let mut dx = dx;
    for g in 0..groups {
        let (mean, inv) = aux.stats[g];
        let xg = &x[g * group_len..(g + 1) * group_len];
        let dyg = &dy[g * group_len..(g + 1) * group_len];
        if let Some(dgamma) = dgamma.as_deref_mut() {
            for c in 0..cg {
                let ch = g * cg + c;
                let mut acc = T::zero();
                for (dv, &xv) in dyg[c * spatial..(c + 1) * spatial]
                    .iter()
                    .zip(&xg[c * spatial..(c + 1) * spatial])
                {
                    acc = acc + *dv * (xv - mean) * inv;
                }
                dgamma[ch] = dgamma[ch] + acc;
            }
        }
        if let Some(dbeta) = dbeta.as_deref_mut() {
            for c in 0..cg {
                let ch = g * cg + c;
                let mut acc = T::zero();
                for dv in &dyg[c * spatial..(c + 1) * spatial] {
                    acc = acc + *dv;
                }
                dbeta[ch] = dbeta[ch] + acc;
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dxhat = dy * gamma; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
            let n = T::from_f64(group_len as f64);
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for c in 0..cg {
                let gm = gamma[g * cg + c];
                for (dv, &xv) in dyg[c * spatial..(c + 1) * spatial]
                    .iter()
                    .zip(&xg[c * spatial..(c + 1) * spatial])
                {
                    let dxh = *dv * gm;
                    let xh = (xv - mean) * inv;
                    sum_dxhat = sum_dxhat + dxh;
                    sum_dxhat_xhat = sum_dxhat_xhat + dxh * xh;
                }
            }
            let m1 = sum_dxhat / n;
            let m2 = sum_dxhat_xhat / n;
            let dxg = &mut dx[g * group_len..(g + 1) * group_len];
            for c in 0..cg {
                let gm = gamma[g * cg + c];
                for ((d, dv), &xv) in dxg[c * spatial..(c + 1) * spatial]
                    .iter_mut()
                    .zip(&dyg[c * spatial..(c + 1) * spatial])
                    .zip(&xg[c * spatial..(c + 1) * spatial])
                {
                    let dxh = *dv * gm;
                    let xh = (xv - mean) * inv;
                    *d = *d + inv * (dxh - m1 - xh * m2);
                }
            }
        }
    }
}

/// Largest group count <= 8 that divides the channel width.
pub fn norm_groups(channels: usize) -> usize {
    (1..=8.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}
