//! Dense loops behind the graph operations.

use crate::scalar::{Scalar, Strides};

/// Returns the NCHW output and the im2col buffer, laid out as `C·K·K × N·H·W`.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    [n, c, h, w]: [usize; 4],
    kernel: &[T],
    o: usize,
    k: usize,
    bias: &[T],
) -> (Vec<T>, Vec<T>) {
    let hw = h * w;
    let ckk = c * k * k;
    let cols = im2col(x, [n, c, h, w], k);
    let mut tmp = vec![T::zero(); o * n * hw];
    T::gemm(o, ckk, n * hw, kernel, Strides::row_major(ckk), &cols, Strides::row_major(n * hw), &mut tmp, false);
    let mut out = vec![T::zero(); n * o * hw];
    for oc in 0..o {
        for b in 0..n {
            let src = &tmp[(oc * n + b) * hw..(oc * n + b + 1) * hw];
            let dst = &mut out[(b * o + oc) * hw..(b * o + oc + 1) * hw];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v + bias[oc];
            }
        }
    }
    (out, cols)
}

/// Valid output columns `[lo, hi)` for a tap shifted by `shift` on a line of length `len`.
fn tap_range(shift: isize, len: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], [n, c, h, w]: [usize; 4], k: usize) -> Vec<T> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let row_len = n * hw;
    let mut cols = vec![T::zero(); c * k * k * row_len];
    for ch in 0..c {
        for ki in 0..k {
            let dy = ki as isize - pad;
            let (y0, y1) = tap_range(dy, h);
            for kj in 0..k {
                let dx = kj as isize - pad;
                let (x0, x1) = tap_range(dx, w);
                let r = (ch * k + ki) * k + kj;
                for b in 0..n {
                    let plane = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    let dst = &mut cols[r * row_len + b * hw..r * row_len + (b + 1) * hw];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        dst[y * w + x0..y * w + x1].copy_from_slice(&plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(col: &[T], [n, c, h, w]: [usize; 4], k: usize, dx_out: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let row_len = n * hw;
    for ch in 0..c {
        for ki in 0..k {
            let dy = ki as isize - pad;
            let (y0, y1) = tap_range(dy, h);
            for kj in 0..k {
                let dx = kj as isize - pad;
                let (x0, x1) = tap_range(dx, w);
                let r = (ch * k + ki) * k + kj;
                for b in 0..n {
                    let src = &col[r * row_len + b * hw..r * row_len + (b + 1) * hw];
                    let plane = &mut dx_out[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let dst = &mut plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for (d, &v) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Rearranges an NCHW gradient into `O × N·H·W`.
fn channel_major<T: Scalar>(g: &[T], n: usize, o: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); g.len()];
    for b in 0..n {
        for oc in 0..o {
            out[(oc * n + b) * hw..(oc * n + b + 1) * hw].copy_from_slice(&g[(b * o + oc) * hw..(b * o + oc + 1) * hw]);
        }
    }
    out
}

pub(crate) fn conv2d_grad_kernel<T: Scalar>(
    g: &[T],
    cols: &[T],
    [n, c, h, w]: [usize; 4],
    o: usize,
    k: usize,
    dk: &mut [T],
) {
    let nhw = n * h * w;
    let ckk = c * k * k;
    let gm = channel_major(g, n, o, h * w);
    // dKᵀ = cols · gmᵀ keeps the long operand contiguous along the reduction axis
    let mut tmp = vec![T::zero(); ckk * o];
    T::gemm(ckk, nhw, o, cols, Strides::row_major(nhw), &gm, Strides::transposed(nhw), &mut tmp, false);
    for oc in 0..o {
        for j in 0..ckk {
            dk[oc * ckk + j] += tmp[j * o + oc];
        }
    }
}

pub(crate) fn conv2d_grad_bias<T: Scalar>(g: &[T], [n, _, h, w]: [usize; 4], o: usize, db: &mut [T]) {
    let hw = h * w;
    let mut tmp = vec![T::zero(); o];
    for b in 0..n {
        for (oc, t) in tmp.iter_mut().enumerate() {
            *t += g[(b * o + oc) * hw..(b * o + oc + 1) * hw].iter().copied().sum::<T>();
        }
    }
    db.iter_mut().zip(&tmp).for_each(|(d, &t)| *d += t);
}

pub(crate) fn conv2d_grad_input<T: Scalar>(g: &[T], kernel: &[T], dims: [usize; 4], o: usize, k: usize, dx: &mut [T]) {
    let [n, c, h, w] = dims;
    let nhw = n * h * w;
    let ckk = c * k * k;
    let gm = channel_major(g, n, o, h * w);
    let mut dcol = vec![T::zero(); ckk * nhw];
    T::gemm(ckk, o, nhw, kernel, Strides::transposed(ckk), &gm, Strides::row_major(nhw), &mut dcol, false);
    col2im_add(&dcol, dims, k, dx);
}

/// 2×2 max pooling. The first maximum wins ties; a NaN in a window wins over numbers.
pub(crate) fn maxpool_forward<T: Scalar>(x: &[T], [n, c, h, w]: [usize; 4]) -> (Vec<T>, Vec<usize>) {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * h2 * w2);
    let mut arg = Vec::with_capacity(n * c * h2 * w2);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..h2 {
            for xx in 0..w2 {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x[idx] > x[best] || (x[idx].is_nan() && !x[best].is_nan()) {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn softmax_channels<T: Scalar>(x: &[T], [n, c, h, w]: [usize; 4]) -> Vec<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); x.len()];
    let mut buf = vec![T::zero(); c];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut mx = T::neg_infinity();
            for ch in 0..c {
                let v = x[base + ch * hw + p];
                if v > mx || v.is_nan() {
                    mx = v;
                }
            }
            let mut total = T::zero();
            for ch in 0..c {
                buf[ch] = (x[base + ch * hw + p] - mx).exp();
                total += buf[ch];
            }
            for ch in 0..c {
                out[base + ch * hw + p] = buf[ch] / total;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Scalar>(y: &[T], g: &[T], [n, c, h, w]: [usize; 4], dx: &mut [T]) {
    let hw = h * w;
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut dot = T::zero();
            for ch in 0..c {
                let i = base + ch * hw + p;
                dot += y[i] * g[i];
            }
            for ch in 0..c {
                let i = base + ch * hw + p;
                dx[i] += y[i] * (g[i] - dot);
            }
        }
    }
}
