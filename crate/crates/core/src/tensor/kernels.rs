//! Convolution and matrix kernels on raw slices.
//!
//! Convolutions are lowered to GEMM through im2col. Work is split across the
//! batch with rayon; per-item weight gradients are reduced sequentially in
//! batch order so results do not depend on the thread count.

use rayon::prelude::*;

use super::Scalar;
use crate::error::{Error, Result};

/// Stride, zero padding and dilation of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvGeom {
            stride,
            pad_h: padding,
            pad_w: padding,
            dilation,
        }
    }

    pub fn with_padding(stride: usize, pad_h: usize, pad_w: usize, dilation: usize) -> Self {
        ConvGeom {
            stride,
            pad_h,
            pad_w,
            dilation,
        }
    }

    pub(crate) fn validate(&self, op: &'static str, kh: usize, kw: usize) -> Result<()> {
        if self.stride == 0 || self.dilation == 0 || kh == 0 || kw == 0 {
            return Err(Error::Config(format!(
                "{op}: stride, dilation and kernel extents must be >= 1 (stride {}, dilation {}, kernel {kh}x{kw})",
                self.stride, self.dilation
            )));
        }
        Ok(())
    }

    /// Output extent of a forward convolution along one axis.
    pub fn out_extent(&self, len: usize, k: usize, pad: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = len + 2 * pad;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }

    /// Output extent of a transposed convolution along one axis.
    pub fn transposed_extent(&self, len: usize, k: usize, pad: usize) -> Option<usize> {
        let full = (len - 1) * self.stride + self.dilation * (k - 1) + 1;
        full.checked_sub(2 * pad).filter(|&v| v > 0)
    }
}

/// Spatial description of one convolution: the "image" side has `channels`
/// planes of `h x w`, the "column" side has `oh x ow` positions.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Lowering {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: ConvGeom,
}

impl Lowering {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.geom.stride == 1
            && self.geom.pad_h == 0
            && self.geom.pad_w == 0
    }

    /// Range of output positions `o` with `0 <= o*stride - pad + offset < len`.
    fn valid_range(len: usize, out: usize, stride: usize, pad: usize, offset: usize) -> (usize, usize) {
        let pad = pad as isize;
        let offset = offset as isize;
        let stride = stride as isize;
        // smallest o with o*stride >= pad - offset
        let lo_num = pad - offset;
        let lo = if lo_num <= 0 { 0 } else { (lo_num + stride - 1) / stride };
        // largest o with o*stride <= len - 1 + pad - offset
        let hi_num = len as isize - 1 + pad - offset;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / stride + 1).min(out as isize);
        let lo = lo.min(hi);
        (lo as usize, hi as usize)
    }

    pub fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        let (s, d) = (self.geom.stride, self.geom.dilation);
        let ncols = self.cols();
        for c in 0..self.channels {
            let plane = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                let (y_lo, y_hi) = Self::valid_range(self.h, self.oh, s, self.geom.pad_h, ki * d);
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    let (x_lo, x_hi) = Self::valid_range(self.w, self.ow, s, self.geom.pad_w, kj * d);
                    for oy in 0..self.oh {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if oy < y_lo || oy >= y_hi {
                            line.fill(T::zero());
                            continue;
                        }
                        let iy = oy * s + ki * d - self.geom.pad_h;
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        line[..x_lo].fill(T::zero());
                        line[x_hi..].fill(T::zero());
                        if x_hi > x_lo {
                            let ix0 = x_lo * s + kj * d - self.geom.pad_w;
                            if s == 1 {
                                line[x_lo..x_hi].copy_from_slice(&src[ix0..ix0 + (x_hi - x_lo)]);
                            } else {
                                for (o, v) in line[x_lo..x_hi].iter_mut().enumerate() {
                                    *v = src[ix0 + o * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adds columns back onto the image (adjoint of [`Lowering::im2col`]).
    pub fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        let (s, d) = (self.geom.stride, self.geom.dilation);
        let ncols = self.cols();
        for c in 0..self.channels {
            let plane = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                let (y_lo, y_hi) = Self::valid_range(self.h, self.oh, s, self.geom.pad_h, ki * d);
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    let (x_lo, x_hi) = Self::valid_range(self.w, self.ow, s, self.geom.pad_w, kj * d);
                    if x_hi <= x_lo {
                        continue;
                    }
                    for oy in y_lo..y_hi {
                        let iy = oy * s + ki * d - self.geom.pad_h;
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let line = &src[oy * self.ow..(oy + 1) * self.ow];
                        let ix0 = x_lo * s + kj * d - self.geom.pad_w;
                        for (o, &v) in line[x_lo..x_hi].iter().enumerate() {
                            dst[ix0 + o * s] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major view of a matrix inside a slice, possibly transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize
    }
}

/// `c <- a * b + beta * c` where `c` is written with strides `(rsc, csc)`.
pub(crate) fn gemm<T: Scalar>(a: Mat<T>, b: Mat<T>, beta: T, c: &mut [T], rsc: usize, csc: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.max_index() < a.data.len(), "gemm lhs out of bounds");
    assert!(k == 0 || b.max_index() < b.data.len(), "gemm rhs out of bounds");
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm output out of bounds");
    // SAFETY: all reachable indices were bounds-checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

/// Forward convolution. `x` is `[batch, lowering.channels, h, w]`, `w` is
/// `[cout, lowering.channels, kh, kw]`, output `[batch, cout, oh, ow]`.
pub(crate) fn conv_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    w: &[T],
    cout: usize,
    bias: Option<&[T]>,
    low: &Lowering,
) -> Vec<T> {
    let in_item = low.channels * low.h * low.w;
    let out_item = cout * low.cols();
    let mut out = vec![T::zero(); batch * out_item];
    if batch == 0 || out_item == 0 {
        return out;
    }
    let wmat = Mat::new(w, cout, low.rows());
    out.par_chunks_mut(out_item)
        .zip(x.par_chunks(in_item.max(1)))
        .for_each(|(o, xi)| {
            if let Some(b) = bias {
                for (co, chunk) in o.chunks_mut(low.cols()).enumerate() {
                    chunk.fill(b[co]);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            if low.is_pointwise() {
                gemm(wmat, Mat::new(xi, low.rows(), low.cols()), beta, o, low.cols(), 1);
            } else {
                let mut cols = vec![T::zero(); low.rows() * low.cols()];
                low.im2col(xi, &mut cols);
                gemm(wmat, Mat::new(&cols, low.rows(), low.cols()), beta, o, low.cols(), 1);
            }
        });
    out
}

/// Gradient of [`conv_forward`] with respect to its input: `gy` is
/// `[batch, cout, oh, ow]`, result `[batch, channels, h, w]`.
pub(crate) fn conv_backward_input<T: Scalar>(
    gy: &[T],
    batch: usize,
    w: &[T],
    cout: usize,
    low: &Lowering,
) -> Vec<T> {
    let in_item = low.channels * low.h * low.w;
    let out_item = cout * low.cols();
    let mut gx = vec![T::zero(); batch * in_item];
    if batch == 0 || in_item == 0 {
        return gx;
    }
    let wt = Mat::new(w, cout, low.rows()).t();
    gx.par_chunks_mut(in_item)
        .zip(gy.par_chunks(out_item.max(1)))
        .for_each(|(gxi, gyi)| {
            let gmat = Mat::new(gyi, cout, low.cols());
            if low.is_pointwise() {
                gemm(wt, gmat, T::zero(), gxi, low.cols(), 1);
            } else {
                let mut cols = vec![T::zero(); low.rows() * low.cols()];
                gemm(wt, gmat, T::zero(), &mut cols, low.cols(), 1);
                low.col2im(&cols, gxi);
            }
        });
    gx
}

/// Gradient of [`conv_forward`] with respect to the weight, shaped like `w`.
pub(crate) fn conv_backward_weight<T: Scalar>(
    gy: &[T],
    x: &[T],
    batch: usize,
    cout: usize,
    low: &Lowering,
) -> Vec<T> {
    let in_item = low.channels * low.h * low.w;
    let out_item = cout * low.cols();
    let wlen = cout * low.rows();
    if batch == 0 {
        return vec![T::zero(); wlen];
    }
    let partials: Vec<Vec<T>> = gy
        .par_chunks(out_item.max(1))
        .zip(x.par_chunks(in_item.max(1)))
        .map(|(gyi, xi)| {
            let mut gw = vec![T::zero(); wlen];
            let gmat = Mat::new(gyi, cout, low.cols());
            if low.is_pointwise() {
                gemm(gmat, Mat::new(xi, low.rows(), low.cols()).t(), T::zero(), &mut gw, low.rows(), 1);
            } else {
                let mut cols = vec![T::zero(); low.rows() * low.cols()];
                low.im2col(xi, &mut cols);
                gemm(gmat, Mat::new(&cols, low.rows(), low.cols()).t(), T::zero(), &mut gw, low.rows(), 1);
            }
            gw
        })
        .collect();
    sum_in_order(partials)
}

/// Per-channel sum of `[batch, channels, plane]` data.
pub(crate) fn channel_sums<T: Scalar>(g: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); channels];
    for b in 0..batch {
        for (c, acc) in out.iter_mut().enumerate() {
            let start = (b * channels + c) * plane;
            *acc += g[start..start + plane].iter().copied().sum::<T>();
        }
    }
    out
}

pub(crate) fn sum_in_order<T: Scalar>(parts: Vec<Vec<T>>) -> Vec<T> {
    let mut iter = parts.into_iter();
    let mut acc = iter.next().unwrap_or_default();
    for p in iter {
        acc.iter_mut().zip(&p).for_each(|(a, &b)| *a += b);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lowering(c: usize, h: usize, w: usize, k: usize, geom: ConvGeom) -> Lowering {
        let oh = geom.out_extent(h, k, geom.pad_h).unwrap();
        let ow = geom.out_extent(w, k, geom.pad_w).unwrap();
        Lowering {
            channels: c,
            h,
            w,
            kh: k,
            kw: k,
            oh,
            ow,
            geom,
        }
    }

    #[test]
    fn output_extent_formula() {
        let g = ConvGeom::new(2, 1, 1);
        assert_eq!(g.out_extent(4, 3, 1), Some(2));
        assert_eq!(g.out_extent(96, 3, 1), Some(48));
        assert_eq!(ConvGeom::new(1, 0, 1).out_extent(2, 3, 0), None);
        assert_eq!(ConvGeom::new(2, 0, 1).transposed_extent(2, 2, 0), Some(4));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let geom = ConvGeom::with_padding(2, 1, 2, 2);
        let low = lowering(2, 7, 6, 3, geom);
        let image: Vec<f64> = (0..2 * 7 * 6).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let cols_probe: Vec<f64> = (0..low.rows() * low.cols()).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
        let mut cols = vec![0.0; low.rows() * low.cols()];
        low.im2col(&image, &mut cols);
        let mut back = vec![0.0; image.len()];
        low.col2im(&cols_probe, &mut back);
        let lhs: f64 = cols.iter().zip(&cols_probe).map(|(a, b)| a * b).sum();
        let rhs: f64 = image.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn gemm_with_transposed_operands() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(Mat::new(&a, 2, 2).t(), Mat::new(&b, 2, 2), 0.0, &mut c, 2, 1);
        // a^T b = [[1*5+3*7, 1*6+3*8],[2*5+4*7, 2*6+4*8]]
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }
}
