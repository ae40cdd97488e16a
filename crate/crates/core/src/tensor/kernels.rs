//! Raw slice kernels behind the differentiable ops. Everything here is NCHW,
//! single-threaded and accumulates in a fixed order, so results are
//! bit-reproducible.

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Range of output positions `o` for which `o * stride + offset` lands in
/// `[0, in_len)`.
#[inline]
fn valid_range(offset: isize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(out_len as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

impl ConvGeometry {
    #[inline]
    fn tap_offset(&self, tap: usize) -> isize {
        (tap * self.dilation) as isize - self.padding as isize
    }
}

/// Gathers one image into a `(c_in·k·k) × (out_h·out_w)` column matrix;
/// taps that fall into the padding are zero.
fn im2col<T: Scalar>(src: &[T], g: &ConvGeometry, col: &mut [T]) {
    let plane_in = g.h * g.w;
    let plane_out = g.out_h * g.out_w;
    col.fill(T::zero());
    for c in 0..g.c_in {
        let chan = &src[c * plane_in..][..plane_in];
        for ky in 0..g.k {
            let oy_off = g.tap_offset(ky);
            let (y0, y1) = valid_range(oy_off, g.stride, g.h, g.out_h);
            for kx in 0..g.k {
                let ox_off = g.tap_offset(kx);
                let (x0, x1) = valid_range(ox_off, g.stride, g.w, g.out_w);
                let row = &mut col[((c * g.k + ky) * g.k + kx) * plane_out..][..plane_out];
                for oy in y0..y1 {
                    let iy = ((oy * g.stride) as isize + oy_off) as usize;
                    let srow = &chan[iy * g.w..][..g.w];
                    let drow = &mut row[oy * g.out_w..][..g.out_w];
                    for ox in x0..x1 {
                        drow[ox] = srow[((ox * g.stride) as isize + ox_off) as usize];
                    }
                }
            }
        }
    }
}

/// Adds a column-matrix gradient back onto the image it was gathered from.
fn col2im<T: Scalar>(col: &[T], g: &ConvGeometry, dst: &mut [T]) {
    let plane_in = g.h * g.w;
    let plane_out = g.out_h * g.out_w;
    for c in 0..g.c_in {
        let chan = &mut dst[c * plane_in..][..plane_in];
        for ky in 0..g.k {
            let oy_off = g.tap_offset(ky);
            let (y0, y1) = valid_range(oy_off, g.stride, g.h, g.out_h);
            for kx in 0..g.k {
                let ox_off = g.tap_offset(kx);
                let (x0, x1) = valid_range(ox_off, g.stride, g.w, g.out_w);
                let row = &col[((c * g.k + ky) * g.k + kx) * plane_out..][..plane_out];
                for oy in y0..y1 {
                    let iy = ((oy * g.stride) as isize + oy_off) as usize;
                    let srow = &row[oy * g.out_w..][..g.out_w];
                    let drow = &mut chan[iy * g.w..][..g.w];
                    for ox in x0..x1 {
                        drow[((ox * g.stride) as isize + ox_off) as usize] += srow[ox];
                    }
                }
            }
        }
    }
}

#[inline]
fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed order.
#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

pub(crate) fn conv2d_forward<T: Scalar>(input: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    let plane_in = g.h * g.w;
    let plane_out = g.out_h * g.out_w;
    let rows = g.c_in * g.k * g.k;
    let mut col = vec![T::zero(); rows * plane_out];
    let mut out = vec![T::zero(); g.n * g.c_out * plane_out];
    for n in 0..g.n {
        im2col(&input[n * g.c_in * plane_in..][..g.c_in * plane_in], g, &mut col);
        for o in 0..g.c_out {
            let dst = &mut out[(n * g.c_out + o) * plane_out..][..plane_out];
            if let Some(b) = bias {
                dst.fill(b[o]);
            }
            for (r, &wv) in weight[o * rows..][..rows].iter().enumerate() {
                axpy(wv, &col[r * plane_out..][..plane_out], dst);
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to input, weight and bias.
pub(crate) fn conv2d_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeometry,
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let plane_in = g.h * g.w;
    let plane_out = g.out_h * g.out_w;
    let rows = g.c_in * g.k * g.k;
    let mut grad_in = need_input.then(|| vec![T::zero(); input.len()]);
    let mut grad_w = vec![T::zero(); weight.len()];
    let mut grad_b = vec![T::zero(); g.c_out];
    let mut col = vec![T::zero(); rows * plane_out];
    let mut grad_col = vec![T::zero(); rows * plane_out];

    for n in 0..g.n {
        im2col(&input[n * g.c_in * plane_in..][..g.c_in * plane_in], g, &mut col);
        let go_n = &grad_out[n * g.c_out * plane_out..][..g.c_out * plane_out];
        for o in 0..g.c_out {
            let go = &go_n[o * plane_out..][..plane_out];
            grad_b[o] += go.iter().copied().sum::<T>();
            for r in 0..rows {
                grad_w[o * rows + r] += dot(go, &col[r * plane_out..][..plane_out]);
            }
        }
        if let Some(gi) = grad_in.as_mut() {
            grad_col.fill(T::zero());
            for r in 0..rows {
                let dst = &mut grad_col[r * plane_out..][..plane_out];
                for o in 0..g.c_out {
                    axpy(weight[o * rows + r], &go_n[o * plane_out..][..plane_out], dst);
                }
            }
            col2im(&grad_col, g, &mut gi[n * g.c_in * plane_in..][..g.c_in * plane_in]);
        }
    }
    (grad_in, grad_w, grad_b)
}

/// Source taps for one output coordinate of an align-corners-false bilinear
/// upsample: `(lo, hi, weight_hi)`; the weight of `lo` is `1 - weight_hi`.
pub(crate) fn bilinear_taps(out_len: usize, in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

pub(crate) fn upsample_bilinear_forward<T: Scalar>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<T> {
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(oh, h, factor);
    let tx = bilinear_taps(ow, w, factor);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy: T = super::sc(fy);
            let gy = T::one() - fy;
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx: T = super::sc(fx);
                let gx = T::one() - fx;
                dst[oy * ow + ox] = gy * (gx * src[y0 * w + x0] + fx * src[y0 * w + x1])
                    + fy * (gx * src[y1 * w + x0] + fx * src[y1 * w + x1]);
            }
        }
    }
    out
}

pub(crate) fn upsample_bilinear_backward<T: Scalar>(
    grad_out: &[T],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<T> {
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(oh, h, factor);
    let tx = bilinear_taps(ow, w, factor);
    let mut grad_in = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let go = &grad_out[p * oh * ow..][..oh * ow];
        let gi = &mut grad_in[p * h * w..][..h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy: T = super::sc(fy);
            let gy = T::one() - fy;
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx: T = super::sc(fx);
                let gx = T::one() - fx;
                let v = go[oy * ow + ox];
                gi[y0 * w + x0] += gy * gx * v;
                gi[y0 * w + x1] += gy * fx * v;
                gi[y1 * w + x0] += fy * gx * v;
                gi[y1 * w + x1] += fy * fx * v;
            }
        }
    }
    grad_in
}

pub(crate) fn upsample_nearest_forward<T: Scalar>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<T> {
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &input[p * h * w..][..h * w];
        for oy in 0..oh {
            let row = &src[(oy / factor) * w..][..w];
            for ox in 0..ow {
                out.push(row[ox / factor]);
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward<T: Scalar>(
    grad_out: &[T],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<T> {
    let (oh, ow) = (h * factor, w * factor);
    let mut grad_in = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let go = &grad_out[p * oh * ow..][..oh * ow];
        let gi = &mut grad_in[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                gi[(oy / factor) * w + ox / factor] += go[oy * ow + ox];
            }
        }
    }
    grad_in
}
