//! Forward and backward kernels for the layer set.
//!
//! Batched kernels take `[N, C, H, W]` activations; the single-sample
//! functions (`conv2d`, `maxpool`, `unpool2x`, `dense`) wrap them for `CHW`
//! inputs.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfold one `C x H x W` sample into a `(C*k*k) x (oh*ow)` matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.positions();
    let pad = g.pad as isize;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *v = if ix < 0 || ix >= g.w as isize {
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

/// Adjoint of [`im2col`]: scatter-add columns back onto the input grid.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.positions();
    let pad = g.pad as isize;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution. Returns the output and the unfolded columns of every
/// sample (needed by the backward pass).
pub(crate) fn conv_forward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    kernels: &[T],
    filters: usize,
    bias: Option<&[T]>,
    keep_cols: bool,
) -> (Vec<T>, Vec<T>) {
    let rows = g.col_rows();
    let p = g.positions();
    let in_len = g.c * g.h * g.w;
    let mut out = vec![T::zero(); n * filters * p];
    let mut all_cols = if keep_cols {
        vec![T::zero(); n * rows * p]
    } else {
        Vec::new()
    };
    let mut scratch = if keep_cols { Vec::new() } else { vec![T::zero(); rows * p] };
    for s in 0..n {
        let cols: &mut [T] = if keep_cols {
            &mut all_cols[s * rows * p..(s + 1) * rows * p]
        } else {
            &mut scratch
        };
        im2col(&x[s * in_len..(s + 1) * in_len], g, cols);
        let o = &mut out[s * filters * p..(s + 1) * filters * p];
        if let Some(b) = bias {
            for f in 0..filters {
                o[f * p..(f + 1) * p].iter_mut().for_each(|v| *v = b[f]);
            }
            T::gemm(filters, rows, p, T::one(), kernels, false, cols, false, T::one(), o);
        } else {
            T::gemm(filters, rows, p, T::one(), kernels, false, cols, false, T::zero(), o);
        }
    }
    (out, all_cols)
}

/// Backward of [`conv_forward`]. Accumulates into `dk`/`db` and returns the
/// input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    dout: &[T],
    n: usize,
    g: &ConvGeom,
    kernels: &[T],
    filters: usize,
    cols: &[T],
    dk: &mut [T],
    db: Option<&mut [T]>,
) -> Vec<T> {
    let rows = g.col_rows();
    let p = g.positions();
    let in_len = g.c * g.h * g.w;
    let mut dx = vec![T::zero(); n * in_len];
    let mut dcols = vec![T::zero(); rows * p];
    let mut db = db;
    for s in 0..n {
        let d = &dout[s * filters * p..(s + 1) * filters * p];
        let c = &cols[s * rows * p..(s + 1) * rows * p];
        // dK += dOut * cols^T
        T::gemm(filters, p, rows, T::one(), d, false, c, true, T::one(), dk);
        if let Some(db) = db.as_deref_mut() {
            for f in 0..filters {
                db[f] += d[f * p..(f + 1) * p].iter().copied().sum::<T>();
            }
        }
        // dcols = K^T * dOut
        T::gemm(rows, filters, p, T::one(), kernels, true, d, false, T::zero(), &mut dcols);
        col2im(&dcols, g, &mut dx[s * in_len..(s + 1) * in_len]);
    }
    dx
}

/// 2-D convolution of a `C x H x W` input with `F x C x k x k` kernels
/// (cross-correlation convention, zero padding).
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (is, ks) = (input.shape(), kernels.shape());
    let mismatch = || TensorError::ShapeMismatch {
        op: "conv2d",
        left: is.to_vec(),
        right: ks.to_vec(),
    };
    if is.len() != 3 || ks.len() != 4 || ks[1] != is[0] || ks[2] != ks[3] {
        return Err(mismatch());
    }
    if stride == 0 {
        return Err(TensorError::InvalidSpec("conv2d stride must be >= 1".into()));
    }
    let k = ks[2];
    let oh = conv_out_extent(is[1], k, stride, padding).ok_or_else(mismatch)?;
    let ow = conv_out_extent(is[2], k, stride, padding).ok_or_else(mismatch)?;
    let g = ConvGeom {
        c: is[0],
        h: is[1],
        w: is[2],
        k,
        stride,
        pad: padding,
        oh,
        ow,
    };
    let (out, _) = conv_forward(input.data(), 1, &g, kernels.data(), ks[0], None, false);
    Tensor::from_vec(&[ks[0], oh, ow], out)
}

pub(crate) fn maxpool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    win: usize,
) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / win, w / win);
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut arg = vec![0u32; planes * oh * ow];
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = 0usize;
                for dy in 0..win {
                    let row = base + (oy * win + dy) * w + ox * win;
                    for dx in 0..win {
                        let v = x[row + dx];
                        // strict > keeps the first maximum in scan order
                        if v > best {
                            best = v;
                            best_i = row + dx;
                        }
                    }
                }
                let o = pl * oh * ow + oy * ow + ox;
                out[o] = best;
                arg[o] = best_i as u32;
            }
        }
    }
    (out, arg)
}

/// Non-overlapping max pooling of a `C x H x W` input.
pub fn maxpool<T: Scalar>(input: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.len() != 3 || window == 0 || !s[1].is_multiple_of(window) || !s[2].is_multiple_of(window) {
        return Err(TensorError::InvalidSpec(format!(
            "maxpool window {window} does not divide input {s:?}"
        )));
    }
    let (out, _) = maxpool_forward(input.data(), s[0], s[1], s[2], window);
    Tensor::from_vec(&[s[0], s[1] / window, s[2] / window], out)
}

pub(crate) fn unpool_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for pl in 0..planes {
        for i in 0..h {
            for j in 0..w {
                out[pl * oh * ow + 2 * i * ow + 2 * j] = x[pl * h * w + i * w + j];
            }
        }
    }
    out
}

pub(crate) fn unpool_backward<T: Scalar>(dout: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        for i in 0..h {
            for j in 0..w {
                dx[pl * h * w + i * w + j] = dout[pl * oh * ow + 2 * i * ow + 2 * j];
            }
        }
    }
    dx
}

/// Zero-filling 2x unpooling: input `(i, j)` lands at `(2i, 2j)`.
pub fn unpool2x<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.len() != 3 {
        return Err(TensorError::InvalidSpec(format!(
            "unpool2x expects CHW input, got {s:?}"
        )));
    }
    Tensor::from_vec(&[s[0], 2 * s[1], 2 * s[2]], unpool_forward(input.data(), s[0], s[1], s[2]))
}

/// Affine map `W x + b` with `W` stored as `out x in`.
pub fn dense<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let ws = weights.shape();
    if ws.len() != 2 || ws[1] != input.len() || bias.len() != ws[0] {
        return Err(TensorError::ShapeMismatch {
            op: "dense",
            left: input.shape().to_vec(),
            right: ws.to_vec(),
        });
    }
    let mut out = bias.data().to_vec();
    T::gemm(1, ws[1], ws[0], T::one(), input.data(), false, weights.data(), true, T::one(), &mut out);
    Tensor::from_vec(&[ws[0]], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_copies_input() {
        let x = Tensor::<f64>::from_vec(&[1, 3, 3], (0..9).map(|v| v as f64).collect()).unwrap();
        let k = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn ones_kernel_on_ones_gives_nines() {
        let x = Tensor::<f64>::full(&[1, 4, 4], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_both_shapes() {
        let x = Tensor::<f64>::zeros(&[2, 4, 4]);
        let k = Tensor::zeros(&[1, 3, 3, 3]);
        let msg = conv2d(&x, &k, 1, 0).unwrap_err().to_string();
        assert!(msg.contains("[2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn maxpool_small_cases() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool(&x, 2).unwrap().data(), &[4.0]);
        let c = Tensor::<f64>::full(&[2, 4, 4], 3.5);
        let y = maxpool(&c, 2).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 3.5));
        assert!(maxpool(&Tensor::<f64>::zeros(&[1, 3, 4]), 2).is_err());
    }

    #[test]
    fn unpool_places_values_on_even_grid() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 1], vec![7.0]).unwrap();
        assert_eq!(unpool2x(&x).unwrap().data(), &[7.0, 0.0, 0.0, 0.0]);
        let x = Tensor::<f64>::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = unpool2x(&x).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        let d = y.data();
        assert_eq!((d[0], d[2], d[8], d[10]), (1.0, 2.0, 3.0, 4.0));
        assert_eq!(d.iter().filter(|&&v| v == 0.0).count(), 12);
    }

    #[test]
    fn dense_identity_and_bias_only() {
        let x = Tensor::<f64>::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let eye = Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let zb = Tensor::zeros(&[3]);
        assert_eq!(dense(&x, &eye, &zb).unwrap(), x);
        let b = Tensor::from_vec(&[2], vec![4.0, 5.0]).unwrap();
        let y = dense(&x, &Tensor::zeros(&[2, 3]), &b).unwrap();
        assert_eq!(y.data(), &[4.0, 5.0]);
        assert!(dense(&x, &Tensor::zeros(&[2, 4]), &b).is_err());
    }
}
