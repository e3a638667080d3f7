//! Raw convolution and resampling kernels shared by forward and backward passes.

use rayon::prelude::*;

use crate::tensor::Float;

/// Geometry of a 2-D cross-correlation over one sample.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.in_h * self.in_w
    }
}

/// Unfolds one sample `[C, H, W]` into `[C*kh*kw, out_h*out_w]`.
pub(crate) fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds columns back, accumulating into `x`.
pub(crate) fn col2im<T: Float>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[b] = W · im2col(x[b])` for every sample, with `W` as `[rows, col_rows]`.
///
/// Samples are independent, so the per-sample loop may run in parallel without
/// changing the result.
pub(crate) fn conv_forward<T: Float>(
    x: &[T],
    batch: usize,
    w: &[T],
    rows: usize,
    g: &ConvGeom,
    out: &mut [T],
) {
    let (ckk, ncols) = (g.col_rows(), g.col_cols());
    let in_len = g.in_len();
    out.par_chunks_mut(rows * ncols)
        .take(batch)
        .enumerate()
        .for_each_init(
            || vec![T::zero(); ckk * ncols],
            |cols, (b, o)| {
                im2col(&x[b * in_len..(b + 1) * in_len], g, cols);
                T::gemm(rows, ckk, ncols, T::one(), w, (ckk, 1), cols, (ncols, 1), T::zero(), o, (ncols, 1));
            },
        );
}

/// `dx[b] += col2im(Wᵀ · dy[b])`; the input-gradient of [`conv_forward`].
pub(crate) fn conv_backward_input<T: Float>(
    dy: &[T],
    batch: usize,
    w: &[T],
    rows: usize,
    g: &ConvGeom,
    dx: &mut [T],
) {
    let (ckk, ncols) = (g.col_rows(), g.col_cols());
    let in_len = g.in_len();
    dx.par_chunks_mut(in_len)
        .take(batch)
        .enumerate()
        .for_each_init(
            || vec![T::zero(); ckk * ncols],
            |cols, (b, d)| {
                let dyb = &dy[b * rows * ncols..(b + 1) * rows * ncols];
                T::gemm(ckk, rows, ncols, T::one(), w, (1, ckk), dyb, (ncols, 1), T::zero(), cols, (ncols, 1));
                col2im(cols, g, d);
            },
        );
}

/// `dW += Σ_b dy[b] · im2col(x[b])ᵀ`, summed over samples in index order.
pub(crate) fn conv_backward_weight<T: Float>(
    dy: &[T],
    batch: usize,
    x: &[T],
    rows: usize,
    g: &ConvGeom,
    dw: &mut [T],
) {
    let (ckk, ncols) = (g.col_rows(), g.col_cols());
    let in_len = g.in_len();
    let mut cols = vec![T::zero(); ckk * ncols];
    for b in 0..batch {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
        let dyb = &dy[b * rows * ncols..(b + 1) * rows * ncols];
        T::gemm(rows, ncols, ckk, T::one(), dyb, (ncols, 1), &cols, (1, ncols), T::one(), dw, (ckk, 1));
    }
}

/// One axis of a half-pixel-centred bilinear resize: `(lo, hi, frac)` per output index.
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resize of `planes` channel planes of size `in_h×in_w`.
pub(crate) fn bilinear_forward<T: Float>(
    x: &[T],
    planes: usize,
    (in_h, in_w): (usize, usize),
    (out_h, out_w): (usize, usize),
    out: &mut [T],
) {
    let ty = bilinear_taps(in_h, out_h);
    let tx = bilinear_taps(in_w, out_w);
    for p in 0..planes {
        let src = &x[p * in_h * in_w..(p + 1) * in_h * in_w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let top = src[y0 * in_w + x0] * (T::one() - fx) + src[y0 * in_w + x1] * fx;
                let bot = src[y1 * in_w + x0] * (T::one() - fx) + src[y1 * in_w + x1] * fx;
                dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
}

pub(crate) fn bilinear_backward<T: Float>(
    dy: &[T],
    planes: usize,
    (in_h, in_w): (usize, usize),
    (out_h, out_w): (usize, usize),
    dx: &mut [T],
) {
    let ty = bilinear_taps(in_h, out_h);
    let tx = bilinear_taps(in_w, out_w);
    for p in 0..planes {
        let g = &dy[p * out_h * out_w..(p + 1) * out_h * out_w];
        let d = &mut dx[p * in_h * in_w..(p + 1) * in_h * in_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(fx);
                let v = g[oy * out_w + ox];
                let (top, bot) = (v * (T::one() - fy), v * fy);
                d[y0 * in_w + x0] += top * (T::one() - fx);
                d[y0 * in_w + x1] += top * fx;
                d[y1 * in_w + x0] += bot * (T::one() - fx);
                d[y1 * in_w + x1] += bot * fx;
            }
        }
    }
}
