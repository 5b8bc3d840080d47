//! Raw slice kernels behind the graph ops.

use crate::error::{shape_err, Result};
use crate::graph::PROB_FLOOR;
use crate::scalar::Scalar;

/// Dot product with eight independent partial sums.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + s
}

/// `y += a·x`
#[inline]
pub fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * *xv;
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn matmul<T: Scalar>(a: &[T], b: &[T], r: usize, k: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av != T::zero() {
                axpy(av, &b[kk * c..(kk + 1) * c], row);
            }
        }
    }
    out
}

pub fn matmul_backward<T: Scalar>(
    a: &[T],
    b: &[T],
    g: &[T],
    r: usize,
    k: usize,
    c: usize,
) -> (Vec<T>, Vec<T>) {
    let mut ga = vec![T::zero(); r * k];
    let mut gb = vec![T::zero(); k * c];
    for i in 0..r {
        let gi = &g[i * c..(i + 1) * c];
        for kk in 0..k {
            ga[i * k + kk] = dot(gi, &b[kk * c..(kk + 1) * c]);
            axpy(a[i * k + kk], gi, &mut gb[kk * c..(kk + 1) * c]);
        }
    }
    (ga, gb)
}

pub fn softmax<T: Scalar>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let mut mx = T::neg_infinity();
            for k in 0..n {
                mx = mx.max(x[idx(k)]);
            }
            let mut s = T::zero();
            for k in 0..n {
                let e = (x[idx(k)] - mx).exp();
                out[idx(k)] = e;
                s += e;
            }
            for k in 0..n {
                out[idx(k)] /= s;
            }
        }
    }
    out
}

pub fn softmax_backward<T: Scalar>(
    y: &[T],
    g: &[T],
    outer: usize,
    n: usize,
    inner: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let d: T = (0..n).map(|k| y[idx(k)] * g[idx(k)]).sum();
            for k in 0..n {
                out[idx(k)] = y[idx(k)] * (g[idx(k)] - d);
            }
        }
    }
    out
}

pub fn kl<T: Scalar>(p: &[T], q: &[T]) -> T {
    let floor = T::of(PROB_FLOOR);
    let mut s = T::zero();
    for (&pv, &qv) in p.iter().zip(q) {
        if pv > T::zero() {
            s += pv * (pv.ln() - qv.max(floor).ln());
        }
    }
    s
}

pub fn kl_backward<T: Scalar>(p: &[T], q: &[T], g: T) -> (Vec<T>, Vec<T>) {
    let floor = T::of(PROB_FLOOR);
    let mut gp = vec![T::zero(); p.len()];
    let mut gq = vec![T::zero(); q.len()];
    for j in 0..p.len() {
        if p[j] > T::zero() {
            gp[j] = g * (p[j].ln() - q[j].max(floor).ln() + T::one());
            if q[j] > floor {
                gq[j] = -g * p[j] / q[j];
            }
        }
    }
    (gp, gq)
}

/// Extents of a (transposed) convolution. For the transposed case `in_*`
/// describe the op input and `out_*` the upsampled output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn conv(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 3 || w.len() != 4 || w[1] != x[0] || stride == 0 {
            return shape_err("conv2d", format!("input {:?} with weight {:?}", x, w));
        }
        let (ph, pw) = (x[1] + 2 * pad, x[2] + 2 * pad);
        if w[2] > ph || w[3] > pw {
            return shape_err(
                "conv2d",
                format!(
                    "kernel {}×{} larger than padded input {}×{}",
                    w[2], w[3], ph, pw
                ),
            );
        }
        Ok(Self {
            in_c: x[0],
            in_h: x[1],
            in_w: x[2],
            out_c: w[0],
            out_h: (ph - w[2]) / stride + 1,
            out_w: (pw - w[3]) / stride + 1,
            kh: w[2],
            kw: w[3],
            stride,
            pad,
        })
    }

    pub fn transposed(
        x: &[usize],
        w: &[usize],
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Self> {
        if x.len() != 3 || w.len() != 4 || w[0] != x[0] || stride == 0 || out_pad >= stride {
            return shape_err(
                "conv_transpose2d",
                format!("input {:?} with weight {:?}", x, w),
            );
        }
        let full_h = (x[1] - 1) * stride + w[2] + out_pad;
        let full_w = (x[2] - 1) * stride + w[3] + out_pad;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return shape_err("conv_transpose2d", "padding removes the whole output");
        }
        Ok(Self {
            in_c: x[0],
            in_h: x[1],
            in_w: x[2],
            out_c: w[1],
            out_h: full_h - 2 * pad,
            out_w: full_w - 2 * pad,
            kh: w[2],
            kw: w[3],
            stride,
            pad,
        })
    }
}

/// Range of `o` in `[0, out_len)` with `0 <= o*stride + k - pad < in_len`.
#[inline]
fn valid(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    if in_len + pad < k + 1 {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Unfolds `src[c × h × w]` into rows `(ic, ky, kx)` of length `oh·ow`,
/// where row entry `(oy, ox)` reads `src[ic, oy·s + ky − pad, ox·s + kx − pad]`
/// (zero outside).
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let n = oh * ow;
    let mut cols = vec![T::zero(); c * kh * kw * n];
    for ic in 0..c {
        let plane = &src[ic * h * w..(ic + 1) * h * w];
        for ky in 0..kh {
            let (y0, y1) = valid(ky, pad, stride, h, oh);
            for kx in 0..kw {
                let (x0, x1) = valid(kx, pad, stride, w, ow);
                let row = &mut cols[((ic * kh + ky) * kw + kx) * n..][..n];
                for oy in y0..y1 {
                    let iy = oy * stride + ky - pad;
                    let srow = &plane[iy * w..(iy + 1) * w];
                    let drow = &mut row[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        let ix0 = x0 + kx - pad;
                        drow[x0..x1].copy_from_slice(&srow[ix0..ix0 + (x1 - x0)]);
                    } else {
                        for ox in x0..x1 {
                            drow[ox] = srow[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates `cols` back into `dst[c × h × w]`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    dst: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let n = oh * ow;
    for ic in 0..c {
        let plane = &mut dst[ic * h * w..(ic + 1) * h * w];
        for ky in 0..kh {
            let (y0, y1) = valid(ky, pad, stride, h, oh);
            for kx in 0..kw {
                let (x0, x1) = valid(kx, pad, stride, w, ow);
                let row = &cols[((ic * kh + ky) * kw + kx) * n..][..n];
                for oy in y0..y1 {
                    let iy = oy * stride + ky - pad;
                    let srow = &row[oy * ow..(oy + 1) * ow];
                    let drow = &mut plane[iy * w..(iy + 1) * w];
                    if stride == 1 {
                        let ix0 = x0 + kx - pad;
                        for (d, &v) in drow[ix0..ix0 + (x1 - x0)].iter_mut().zip(&srow[x0..x1]) {
                            *d += v;
                        }
                    } else {
                        for ox in x0..x1 {
                            drow[ox * stride + kx - pad] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], b: Option<&[T]>, n: usize) {
    if let Some(b) = b {
        for (oc, plane) in out.chunks_exact_mut(n).enumerate() {
            plane.iter_mut().for_each(|v| *v += b[oc]);
        }
    }
}

fn bias_grad<T: Scalar>(gout: &[T], c: usize, n: usize) -> Vec<T> {
    (0..c)
        .map(|oc| gout[oc * n..(oc + 1) * n].iter().copied().sum())
        .collect()
}

pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let n = g.out_h * g.out_w;
    let ck = g.in_c * g.kh * g.kw;
    let cols = im2col(
        x, g.in_c, g.in_h, g.in_w, g.kh, g.kw, g.stride, g.pad, g.out_h, g.out_w,
    );
    let mut out = matmul(w, &cols, g.out_c, ck, n);
    add_bias(&mut out, b, n);
    out
}

/// Gradients for input, weights and bias. The input gradient is left empty
/// unless `need_x`.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    need_x: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = g.out_h * g.out_w;
    if g.stride == 1 {
        return conv2d_backward_s1(x, w, gout, g, need_x);
    }
    let ck = g.in_c * g.kh * g.kw;
    let cols = im2col(
        x, g.in_c, g.in_h, g.in_w, g.kh, g.kw, g.stride, g.pad, g.out_h, g.out_w,
    );
    let mut gw = vec![T::zero(); w.len()];
    let mut gcols = vec![T::zero(); if need_x { ck * n } else { 0 }];
    for oc in 0..g.out_c {
        let go = &gout[oc * n..(oc + 1) * n];
        for r in 0..ck {
            let col = &cols[r * n..(r + 1) * n];
            gw[oc * ck + r] = dot(go, col);
            let wv = w[oc * ck + r];
            if need_x && wv != T::zero() {
                axpy(wv, go, &mut gcols[r * n..(r + 1) * n]);
            }
        }
    }
    let mut gx = Vec::new();
    if need_x {
        gx = vec![T::zero(); x.len()];
        col2im(
            &gcols, &mut gx, g.in_c, g.in_h, g.in_w, g.kh, g.kw, g.stride, g.pad, g.out_h, g.out_w,
        );
    }
    (gx, gw, bias_grad(gout, g.out_c, n))
}

fn conv2d_backward_s1<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    need_x: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ih, iw, oh, ow) = (g.in_h, g.in_w, g.out_h, g.out_w);
    let mut gw = vec![T::zero(); w.len()];
    let mut gx = vec![T::zero(); if need_x { x.len() } else { 0 }];
    for oc in 0..g.out_c {
        let go = &gout[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..g.in_c {
            let xp = &x[ic * ih * iw..(ic + 1) * ih * iw];
            for ky in 0..g.kh {
                let (y0, y1) = valid(ky, g.pad, 1, ih, oh);
                for kx in 0..g.kw {
                    let (x0, x1) = valid(kx, g.pad, 1, iw, ow);
                    let wi = ((oc * g.in_c + ic) * g.kh + ky) * g.kw + kx;
                    let wv = w[wi];
                    let ix0 = x0 + kx - g.pad;
                    let len = x1 - x0;
                    let mut acc = T::zero();
                    for oy in y0..y1 {
                        let iy = oy + ky - g.pad;
                        let gr = &go[oy * ow + x0..oy * ow + x1];
                        acc += dot(gr, &xp[iy * iw + ix0..iy * iw + ix0 + len]);
                        if need_x && wv != T::zero() {
                            let base = ic * ih * iw + iy * iw + ix0;
                            axpy(wv, gr, &mut gx[base..base + len]);
                        }
                    }
                    gw[wi] = acc;
                }
            }
        }
    }
    (gx, gw, bias_grad(gout, g.out_c, oh * ow))
}

pub fn conv_t_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let n_in = g.in_h * g.in_w;
    let ok = g.out_c * g.kh * g.kw;
    let mut cols = vec![T::zero(); ok * n_in];
    for ic in 0..g.in_c {
        let xi = &x[ic * n_in..(ic + 1) * n_in];
        for r in 0..ok {
            let wv = w[ic * ok + r];
            if wv != T::zero() {
                axpy(wv, xi, &mut cols[r * n_in..(r + 1) * n_in]);
            }
        }
    }
    let n = g.out_h * g.out_w;
    let mut out = vec![T::zero(); g.out_c * n];
    col2im(
        &cols, &mut out, g.out_c, g.out_h, g.out_w, g.kh, g.kw, g.stride, g.pad, g.in_h, g.in_w,
    );
    add_bias(&mut out, b, n);
    out
}

pub fn conv_t_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n_in = g.in_h * g.in_w;
    let ok = g.out_c * g.kh * g.kw;
    let gcols = im2col(
        gout, g.out_c, g.out_h, g.out_w, g.kh, g.kw, g.stride, g.pad, g.in_h, g.in_w,
    );
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    for ic in 0..g.in_c {
        let xi = &x[ic * n_in..(ic + 1) * n_in];
        for r in 0..ok {
            let gc = &gcols[r * n_in..(r + 1) * n_in];
            gw[ic * ok + r] = dot(xi, gc);
            let wv = w[ic * ok + r];
            if wv != T::zero() {
                axpy(wv, gc, &mut gx[ic * n_in..(ic + 1) * n_in]);
            }
        }
    }
    (gx, gw, bias_grad(gout, g.out_c, g.out_h * g.out_w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for k in 0..4 {
            for pad in 0..3 {
                for stride in 1..4 {
                    for in_len in 1..8 {
                        let out_len = 9;
                        let brute: Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let p = (o * stride + k) as isize - pad as isize;
                                p >= 0 && (p as usize) < in_len
                            })
                            .collect();
                        let (lo, hi) = valid(k, pad, stride, in_len, out_len);
                        assert_eq!(
                            (lo..hi).collect::<Vec<_>>(),
                            brute,
                            "k{k} p{pad} s{stride} n{in_len}"
                        );
                    }
                }
            }
        }
    }
}
