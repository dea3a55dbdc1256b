//! Raw numeric kernels over `[n, c, h, w]` buffers. No autograd bookkeeping here.

use crate::tensor::{matmul, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad` is in bounds.
fn valid_cols(g: &ConvGeometry, kx: usize, ow: usize) -> (usize, usize) {
    let lo = if kx >= g.pad { 0 } else { (g.pad - kx).div_ceil(g.stride) };
    // need ox * stride + kx - pad <= w - 1
    let limit = g.w + g.pad;
    let hi = if limit > kx { ((limit - kx - 1) / g.stride + 1).min(ow) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                let (lo, hi) = valid_cols(g, kx, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    if hi > lo {
                        let first = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            out_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (o, ix) in out_row[lo..hi].iter_mut().zip((first..).step_by(g.stride)) {
                                *o = src[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                let (lo, hi) = valid_cols(g, kx, ow);
                if hi <= lo {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * ow + lo..oy * ow + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (ix, &v) in (first..).step_by(g.stride).zip(s) {
                            dst[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Batched 2-d convolution. `out` must hold `n * c_out * oh * ow` values.
pub fn conv2d_forward<T: Scalar>(x: &[T], n: usize, weight: &[T], bias: &[T], g: &ConvGeometry, out: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let spatial = oh * ow;
    let in_per = g.c_in * g.h * g.w;
    let out_per = g.c_out * spatial;
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.col_rows() * spatial] };
    for s in 0..n {
        let xs = &x[s * in_per..(s + 1) * in_per];
        let os = &mut out[s * out_per..(s + 1) * out_per];
        for (co, row) in os.chunks_mut(spatial).enumerate() {
            row.fill(bias[co]);
        }
        let cols_ref: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        matmul(g.c_out, g.col_rows(), spatial, weight, false, cols_ref, false, T::one(), os);
    }
}

/// Accumulates gradients of a batched convolution into `dx`, `dw`, and `db`
/// (any of which may be skipped).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    weight: &[T],
    g: &ConvGeometry,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let spatial = g.out_h() * g.out_w();
    let in_per = g.c_in * g.h * g.w;
    let out_per = g.c_out * spatial;
    let rows = g.col_rows();
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * spatial }];
    let mut dcols = vec![T::zero(); if dx.is_some() { rows * spatial } else { 0 }];
    for s in 0..n {
        let xs = &x[s * in_per..(s + 1) * in_per];
        let gs = &dout[s * out_per..(s + 1) * out_per];
        if let Some(db) = db.as_deref_mut() {
            for (co, row) in gs.chunks(spatial).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let cols_ref: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            matmul(g.c_out, spatial, rows, gs, false, cols_ref, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[s * in_per..(s + 1) * in_per];
            if g.is_pointwise() {
                matmul(rows, g.c_out, spatial, weight, true, gs, false, T::one(), dxs);
            } else {
                matmul(rows, g.c_out, spatial, weight, true, gs, false, T::zero(), &mut dcols);
                col2im(&dcols, g, dxs);
            }
        }
    }
}

/// 2x2 max pooling with stride 2. Returns the flat argmax index per output.
pub fn maxpool2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, out: &mut [T]) -> Vec<u32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut arg = vec![0u32; planes * oh * ow];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = x[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                out[o] = best;
                arg[o] = best_idx as u32;
            }
        }
    }
    arg
}

pub fn upsample2_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, out: &mut [T]) {
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                out[p * oh * ow + oy * ow + ox] = x[p * h * w + (oy / 2) * w + ox / 2];
            }
        }
    }
}

pub fn upsample2_backward<T: Scalar>(dout: &[T], planes: usize, h: usize, w: usize, dx: &mut [T]) {
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                dx[p * h * w + (oy / 2) * w + ox / 2] += dout[p * oh * ow + oy * ow + ox];
            }
        }
    }
}

/// Per-plane standardization: `(x - mean) / sqrt(var + eps)` with the
/// population variance. Returns the normalized values and `1/sqrt(var+eps)`.
pub fn instance_norm_forward<T: Scalar>(x: &[T], planes: usize, spatial: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); planes];
    let count = T::of(spatial as f64);
    for p in 0..planes {
        let xs = &x[p * spatial..(p + 1) * spatial];
        let mean = xs.iter().copied().sum::<T>() / count;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
        let inv = T::one() / (var + eps).sqrt();
        inv_std[p] = inv;
        for (o, &v) in y[p * spatial..(p + 1) * spatial].iter_mut().zip(xs) {
            *o = (v - mean) * inv;
        }
    }
    (y, inv_std)
}

pub fn instance_norm_backward<T: Scalar>(y: &[T], inv_std: &[T], dout: &[T], spatial: usize, dx: &mut [T]) {
    let count = T::of(spatial as f64);
    for (p, &inv) in inv_std.iter().enumerate() {
        let range = p * spatial..(p + 1) * spatial;
        let ys = &y[range.clone()];
        let gs = &dout[range.clone()];
        let mean_g = gs.iter().copied().sum::<T>() / count;
        let mean_gy = gs.iter().zip(ys).map(|(&g, &v)| g * v).sum::<T>() / count;
        for ((d, &g), &v) in dx[range].iter_mut().zip(gs).zip(ys) {
            *d += inv * (g - mean_g - v * mean_gy);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-summation convolution used as an oracle for the im2col path.
    fn naive_conv(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeometry) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.c_out * oh * ow];
        for co in 0..g.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..g.c_in {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    acc += x[ci * g.h * g.w + iy as usize * g.w + ix as usize]
                                        * w[((co * g.c_in + ci) * g.kernel + ky) * g.kernel + kx];
                                }
                            }
                        }
                    }
                    out[co * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_sum() {
        for (kernel, stride, pad) in [(3, 1, 1), (4, 2, 1), (1, 1, 0), (3, 2, 0)] {
            let g = ConvGeometry { c_in: 3, c_out: 2, kernel, stride, pad, h: 6, w: 6 };
            let x: Vec<f64> = (0..3 * 36).map(|i| ((i * 7) % 11) as f64 * 0.1 - 0.4).collect();
            let w: Vec<f64> = (0..2 * 3 * kernel * kernel).map(|i| ((i * 5) % 7) as f64 * 0.2 - 0.5).collect();
            let b = vec![0.25, -0.5];
            let mut out = vec![0.0; 2 * g.out_h() * g.out_w()];
            conv2d_forward(&x, 1, &w, &b, &g, &mut out);
            let expected = naive_conv(&x, &w, &b, &g);
            for (a, e) in out.iter().zip(&expected) {
                assert!((a - e).abs() < 1e-12, "k={kernel} s={stride}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn maxpool_prefers_first_maximum() {
        let x = [1.0f64, 1.0, 1.0, 1.0];
        let mut out = [0.0];
        let arg = maxpool2_forward(&x, 1, 2, 2, &mut out);
        assert_eq!(arg, vec![0]);
        assert_eq!(out[0], 1.0);
    }

    #[test]
    fn constant_plane_normalizes_to_zero() {
        let (y, _) = instance_norm_forward(&[3.0f64; 8], 2, 4, 1e-5);
        assert!(y.iter().all(|&v| v == 0.0));
    }
}
