//! Raw compute kernels over flat row-major buffers.
//!
//! Parallel kernels partition work by output element, so every output value
//! is accumulated by one thread in a fixed order and results are bitwise
//! reproducible regardless of thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;
use crate::tensor::strides_of;

/// Below this many multiply-adds a kernel runs single-threaded.
const PAR_THRESHOLD: usize = 1 << 15;

pub fn permute<S: Scalar>(data: &[S], shape: &[usize], axes: &[usize]) -> Vec<S> {
    let nd = shape.len();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if nd == 0 || n == 0 {
        return data.to_vec();
    }
    let inner = out_shape[nd - 1];
    let inner_stride = src_strides[nd - 1];
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    loop {
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        // odometer over all but the last axis
        let mut ax = nd - 1;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// `[B, C, T, F] -> [B, C*kt*kf, T/kt, F/kf]`, packing channel-major, then
/// local time, then local frequency.
pub fn unfold<S: Scalar>(x: &[S], dims: [usize; 4], kt: usize, kf: usize) -> Vec<S> {
    let [b, c, t, f] = dims;
    let (gt, gf) = (t / kt, f / kf);
    let mut out = vec![S::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..kt {
                for j in 0..kf {
                    let oc = (ci * kt + i) * kf + j;
                    for p in 0..gt {
                        let src = ((bi * c + ci) * t + p * kt + i) * f + j;
                        let dst = ((bi * c * kt * kf + oc) * gt + p) * gf;
                        for q in 0..gf {
                            out[dst + q] = x[src + q * kf];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Exact inverse of [`unfold`]; `dims` are the folded output dims `[B, C, T, F]`.
pub fn fold<S: Scalar>(y: &[S], dims: [usize; 4], kt: usize, kf: usize) -> Vec<S> {
    let [b, c, t, f] = dims;
    let (gt, gf) = (t / kt, f / kf);
    let mut out = vec![S::zero(); y.len()];
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..kt {
                for j in 0..kf {
                    let oc = (ci * kt + i) * kf + j;
                    for p in 0..gt {
                        let dst = ((bi * c + ci) * t + p * kt + i) * f + j;
                        let src = ((bi * c * kt * kf + oc) * gt + p) * gf;
                        for q in 0..gf {
                            out[dst + q * kf] = y[src + q];
                        }
                    }
                }
            }
        }
    }
    out
}

fn gemm_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    // c[m,n] += a[m,k] * b[k,n]
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Batched `[nb,m,k] x [nb,k,n]`; with `b_shared` the right operand is a single `[k,n]`.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], nb: usize, m: usize, k: usize, n: usize, b_shared: bool) -> Vec<S> {
    let mut out = vec![S::zero(); nb * m * n];
    let work = nb * m * k * n;
    if b_shared {
        // fold the batch into rows
        let rows = nb * m;
        if work >= PAR_THRESHOLD {
            let chunk = rows.div_ceil(rayon::current_num_threads().max(1) * 4).max(1);
            out.par_chunks_mut(chunk * n).enumerate().for_each(|(ci, oc)| {
                let r0 = ci * chunk;
                let r = oc.len() / n;
                gemm_acc(&a[r0 * k..(r0 + r) * k], b, oc, r, k, n);
            });
        } else {
            gemm_acc(a, b, &mut out, rows, k, n);
        }
        return out;
    }
    let body = |bi: usize, oc: &mut [S]| {
        gemm_acc(&a[bi * m * k..(bi + 1) * m * k], &b[bi * k * n..(bi + 1) * k * n], oc, m, k, n);
    };
    if work >= PAR_THRESHOLD && nb > 1 {
        out.par_chunks_mut(m * n).enumerate().for_each(|(bi, oc)| body(bi, oc));
    } else {
        out.chunks_mut(m * n).enumerate().for_each(|(bi, oc)| body(bi, oc));
    }
    out
}

/// Transpose the last two axes of a `[nb, r, c]` buffer.
pub fn transpose_last2<S: Scalar>(x: &[S], nb: usize, r: usize, c: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for bi in 0..nb {
        let base = bi * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = x[base + i * c + j];
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    fn macs(&self) -> usize {
        self.batch * self.c_in * self.c_out * self.h * self.w * self.kh * self.kw
    }
}

/// Accumulate `out += wv * shift(inp, dy, dx)` over the zero-padded plane.
#[inline]
fn shifted_axpy<S: Scalar>(out: &mut [S], inp: &[S], wv: S, dy: isize, dx: isize, h: usize, w: usize) {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy).min(h as isize).max(0) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let orow = &mut out[y * w + x0..y * w + x1];
        let srow = &inp[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
        for (o, &s) in orow.iter_mut().zip(srow) {
            *o += wv * s;
        }
    }
}

/// Dot product of `a` with `shift(b, dy, dx)` over the zero-padded plane.
#[inline]
fn shifted_dot<S: Scalar>(a: &[S], b: &[S], dy: isize, dx: isize, h: usize, w: usize) -> S {
    let y0 = (-dy).max(0) as usize;
    let y1 = (h as isize - dy).min(h as isize).max(0) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
    let mut acc = S::zero();
    if x0 >= x1 {
        return acc;
    }
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let arow = &a[y * w + x0..y * w + x1];
        let brow = &b[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
        for (&p, &q) in arow.iter().zip(brow) {
            acc += p * q;
        }
    }
    acc
}

fn maybe_par_planes<S: Scalar>(out: &mut [S], plane: usize, par: bool, f: impl Fn(usize, &mut [S]) + Sync + Send) {
    if par {
        out.par_chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p));
    } else {
        out.chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p));
    }
}

/// Same-padded stride-1 convolution. `w` is `[c_out, c_in, kh, kw]`.
pub fn conv2d<S: Scalar>(x: &[S], w: &[S], bias: Option<&[S]>, d: ConvDims) -> Vec<S> {
    let plane = d.h * d.w;
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    let mut out = vec![S::zero(); d.batch * d.c_out * plane];
    maybe_par_planes(&mut out, plane, d.macs() >= PAR_THRESHOLD, |idx, op| {
        let (bi, co) = (idx / d.c_out, idx % d.c_out);
        if let Some(b) = bias {
            op.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..d.c_in {
            let xp = &x[(bi * d.c_in + ci) * plane..(bi * d.c_in + ci + 1) * plane];
            for i in 0..d.kh {
                for j in 0..d.kw {
                    let wv = w[((co * d.c_in + ci) * d.kh + i) * d.kw + j];
                    shifted_axpy(op, xp, wv, i as isize - ph, j as isize - pw, d.h, d.w);
                }
            }
        }
    });
    out
}

pub fn conv2d_grad_input<S: Scalar>(gout: &[S], w: &[S], d: ConvDims) -> Vec<S> {
    let plane = d.h * d.w;
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    let mut gx = vec![S::zero(); d.batch * d.c_in * plane];
    maybe_par_planes(&mut gx, plane, d.macs() >= PAR_THRESHOLD, |idx, gp| {
        let (bi, ci) = (idx / d.c_in, idx % d.c_in);
        for co in 0..d.c_out {
            let go = &gout[(bi * d.c_out + co) * plane..(bi * d.c_out + co + 1) * plane];
            for i in 0..d.kh {
                for j in 0..d.kw {
                    let wv = w[((co * d.c_in + ci) * d.kh + i) * d.kw + j];
                    // out[y] uses in[y + s]; so gin[y'] += w * gout[y' - s]
                    shifted_axpy(gp, go, wv, ph - i as isize, pw - j as isize, d.h, d.w);
                }
            }
        }
    });
    gx
}

pub fn conv2d_grad_weight<S: Scalar>(gout: &[S], x: &[S], d: ConvDims) -> Vec<S> {
    let plane = d.h * d.w;
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    let per_out = d.c_in * d.kh * d.kw;
    let mut gw = vec![S::zero(); d.c_out * per_out];
    maybe_par_planes(&mut gw, per_out, d.macs() >= PAR_THRESHOLD, |co, gwp| {
        for ci in 0..d.c_in {
            for i in 0..d.kh {
                for j in 0..d.kw {
                    let mut acc = S::zero();
                    for bi in 0..d.batch {
                        let go = &gout[(bi * d.c_out + co) * plane..(bi * d.c_out + co + 1) * plane];
                        let xp = &x[(bi * d.c_in + ci) * plane..(bi * d.c_in + ci + 1) * plane];
                        acc += shifted_dot(go, xp, i as isize - ph, j as isize - pw, d.h, d.w);
                    }
                    gwp[(ci * d.kh + i) * d.kw + j] = acc;
                }
            }
        }
    });
    gw
}

/// Per-channel reduction of a `[B, C, L]` buffer: `out[c] = sum_{b,l} x`.
pub fn channel_sum<S: Scalar>(x: &[S], b: usize, c: usize, l: usize) -> Vec<S> {
    let mut out = vec![S::zero(); c];
    for bi in 0..b {
        for (ci, o) in out.iter_mut().enumerate() {
            *o += x[(bi * c + ci) * l..(bi * c + ci + 1) * l].iter().copied().sum::<S>();
        }
    }
    out
}

/// Depthwise same-padded convolution. `w` is `[C, 1, kh, kw]`; `d.c_in == d.c_out`.
pub fn depthwise_conv2d<S: Scalar>(x: &[S], w: &[S], bias: Option<&[S]>, d: ConvDims) -> Vec<S> {
    let plane = d.h * d.w;
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    let mut out = vec![S::zero(); x.len()];
    let par = d.macs() / d.c_in.max(1) >= PAR_THRESHOLD;
    maybe_par_planes(&mut out, plane, par, |idx, op| {
        let c = idx % d.c_in;
        if let Some(b) = bias {
            op.iter_mut().for_each(|v| *v = b[c]);
        }
        let xp = &x[idx * plane..(idx + 1) * plane];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let wv = w[(c * d.kh + i) * d.kw + j];
                shifted_axpy(op, xp, wv, i as isize - ph, j as isize - pw, d.h, d.w);
            }
        }
    });
    out
}

pub fn depthwise_grad_input<S: Scalar>(gout: &[S], w: &[S], d: ConvDims) -> Vec<S> {
    let plane = d.h * d.w;
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    let mut gx = vec![S::zero(); gout.len()];
    let par = d.macs() / d.c_in.max(1) >= PAR_THRESHOLD;
    maybe_par_planes(&mut gx, plane, par, |idx, gp| {
        let c = idx % d.c_in;
        let go = &gout[idx * plane..(idx + 1) * plane];
        for i in 0..d.kh {
            for j in 0..d.kw {
                let wv = w[(c * d.kh + i) * d.kw + j];
                shifted_axpy(gp, go, wv, ph - i as isize, pw - j as isize, d.h, d.w);
            }
        }
    });
    gx
}

pub fn depthwise_grad_weight<S: Scalar>(gout: &[S], x: &[S], d: ConvDims) -> Vec<S> {
    let plane = d.h * d.w;
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    let per = d.kh * d.kw;
    let mut gw = vec![S::zero(); d.c_in * per];
    let par = d.macs() / d.c_in.max(1) >= PAR_THRESHOLD;
    maybe_par_planes(&mut gw, per, par, |c, gwp| {
        for i in 0..d.kh {
            for j in 0..d.kw {
                let mut acc = S::zero();
                for bi in 0..d.batch {
                    let o = (bi * d.c_in + c) * plane;
                    acc += shifted_dot(&gout[o..o + plane], &x[o..o + plane], i as isize - ph, j as isize - pw, d.h, d.w);
                }
                gwp[i * d.kw + j] = acc;
            }
        }
    });
    gw
}

/// Non-overlapping max pool over the last two axes of `[N, H, W]`.
/// Returns values and the flat input index of the first maximal element.
pub fn max_pool<S: Scalar>(x: &[S], n: usize, h: usize, w: usize, ph: usize, pw: usize) -> (Vec<S>, Vec<usize>) {
    let (oh, ow) = (h / ph, w / pw);
    let mut out = Vec::with_capacity(n * oh * ow);
    let mut arg = Vec::with_capacity(n * oh * ow);
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = S::neg_infinity();
                let mut best_i = 0;
                for i in 0..ph {
                    for j in 0..pw {
                        let idx = (ni * h + oy * ph + i) * w + ox * pw + j;
                        if x[idx] > best {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub fn avg_pool<S: Scalar>(x: &[S], n: usize, h: usize, w: usize, ph: usize, pw: usize) -> Vec<S> {
    let (oh, ow) = (h / ph, w / pw);
    let scale = S::one() / S::lit((ph * pw) as f64);
    let mut out = Vec::with_capacity(n * oh * ow);
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = S::zero();
                for i in 0..ph {
                    for j in 0..pw {
                        acc += x[(ni * h + oy * ph + i) * w + ox * pw + j];
                    }
                }
                out.push(acc * scale);
            }
        }
    }
    out
}

/// Max-subtracted softmax over contiguous rows of length `len`.
pub fn softmax_rows<S: Scalar>(x: &[S], len: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    let body = |(row, o): (&[S], &mut [S])| {
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut z = S::zero();
        for (ov, &v) in o.iter_mut().zip(row) {
            *ov = (v - m).exp();
            z += *ov;
        }
        let inv = S::one() / z;
        o.iter_mut().for_each(|v| *v *= inv);
    };
    if x.len() >= PAR_THRESHOLD {
        x.par_chunks(len).zip(out.par_chunks_mut(len)).for_each(body);
    } else {
        x.chunks(len).zip(out.chunks_mut(len)).for_each(body);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_naive(x: &[f64], w: &[f64], d: ConvDims) -> Vec<f64> {
        let mut out = vec![0.0; d.batch * d.c_out * d.h * d.w];
        for b in 0..d.batch {
            for co in 0..d.c_out {
                for y in 0..d.h {
                    for xx in 0..d.w {
                        let mut acc = 0.0;
                        for ci in 0..d.c_in {
                            for i in 0..d.kh {
                                for j in 0..d.kw {
                                    let sy = y as isize + i as isize - (d.kh / 2) as isize;
                                    let sx = xx as isize + j as isize - (d.kw / 2) as isize;
                                    if sy < 0 || sx < 0 || sy >= d.h as isize || sx >= d.w as isize {
                                        continue;
                                    }
                                    acc += w[((co * d.c_in + ci) * d.kh + i) * d.kw + j]
                                        * x[((b * d.c_in + ci) * d.h + sy as usize) * d.w + sx as usize];
                                }
                            }
                        }
                        out[((b * d.c_out + co) * d.h + y) * d.w + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let d = ConvDims { batch: 2, c_in: 3, c_out: 4, h: 5, w: 6, kh: 3, kw: 3 };
        let x: Vec<f64> = (0..d.batch * d.c_in * 30).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..d.c_out * d.c_in * 9).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        assert_eq!(conv2d(&x, &w, None, d), conv_naive(&x, &w, d));
    }

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 1, 2, 2, 2, false), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn permute_3d_roundtrip() {
        let shape = [2, 3, 4];
        let x: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let axes = [2, 0, 1];
        let y = permute(&x, &shape, &axes);
        let back = permute(&y, &[4, 2, 3], &inverse_axes(&axes));
        assert_eq!(back, x);
        // y[k, i, j] = x[i, j, k]
        assert_eq!(y[(3 * 2 + 1) * 3 + 2], x[(1 * 3 + 2) * 4 + 3]);
    }

    #[test]
    fn max_pool_takes_first_maximum() {
        let x = [1.0, 1.0, 0.0, 1.0];
        let (v, a) = max_pool(&x, 1, 2, 2, 2, 2);
        assert_eq!(v, vec![1.0]);
        assert_eq!(a, vec![0]);
    }
}
