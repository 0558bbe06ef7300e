//! Forward and backward kernels for the dense layers.
//!
//! Convolutions are lowered to im2col + GEMM one sample at a time. Samples
//! are processed in parallel; weight gradients are summed per fixed-size
//! chunk of samples and the chunk partials are reduced in order, so the
//! result does not depend on the number of worker threads.

use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{CoalaError, Result};

/// Samples per partial weight-gradient buffer.
const REDUCE_CHUNK: usize = 4;

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, T: Scalar> Mat<'a, T> {
    pub(crate) fn rm(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        Mat {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub(crate) fn t(self) -> Self {
        Mat {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn in_bounds(&self) -> bool {
        if self.rows == 0 || self.cols == 0 {
            return true;
        }
        let last = (self.rows as isize - 1) * self.rs + (self.cols as isize - 1) * self.cs;
        last >= 0 && (last as usize) < self.data.len()
    }
}

/// `c = a * b + beta * c` with `c` row-major `a.rows x b.cols`.
pub(crate) fn matmul_into<T: Scalar>(a: Mat<'_, T>, b: Mat<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    assert!(a.in_bounds() && b.in_bounds(), "matrix view out of bounds");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v = *v * beta;
        }
        return;
    }
    // SAFETY: bounds of all three views were checked above; `c` is a unique borrow.
    unsafe {
        T::gemm(
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
            n as isize,
            1,
        );
    }
}

/// Sliding-window geometry of a 2-D convolution over one `[C, H, W]` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// `floor((input + 2 pad - kernel) / stride) + 1`, or `None` if the padded
/// input is smaller than the kernel.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

/// `(input - 1) stride - 2 pad + kernel`.
pub fn conv_transpose_output_len(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    if stride == 0 || kernel == 0 || input == 0 {
        return None;
    }
    ((input - 1) * stride + kernel).checked_sub(2 * pad)
}

impl ConvGeometry {
    fn new(
        channels: usize,
        in_h: usize,
        in_w: usize,
        (kh, kw): (usize, usize),
        (sh, sw): (usize, usize),
        (ph, pw): (usize, usize),
    ) -> Option<Self> {
        Some(ConvGeometry {
            channels,
            in_h,
            in_w,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            out_h: conv_output_len(in_h, kh, sh, ph)?,
            out_w: conv_output_len(in_w, kw, sw, pw)?,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.channels * self.in_h * self.in_w
    }
}

pub(crate) fn im2col<T: Scalar>(img: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let r = (c * g.kh + i) * g.kw + j;
                let row = &mut cols[r * ncols..(r + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.sh + i) as isize - g.ph as isize;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.sw + j) as isize - g.pw as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize {
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

/// Scatter-add of [`im2col`] columns back onto an image.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, img: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let r = (c * g.kh + i) * g.kw + j;
                let row = &cols[r * ncols..(r + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.sh + i) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let src = &row[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &s) in src.iter().enumerate() {
                        let ix = (ox * g.sw + j) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

fn check_rank4(op: &'static str, t: &[usize]) -> Result<()> {
    if t.len() != 4 {
        return Err(CoalaError::shape(op, t, &[0, 0, 0, 0]));
    }
    Ok(())
}

fn check_bias<T: Scalar>(op: &'static str, bias: Option<&Tensor<T>>, n: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [n] {
            return Err(CoalaError::shape(op, b.shape(), &[n]));
        }
    }
    Ok(())
}

/// Geometry of a convolution with input `[B, Cin, H, W]` and weights `[Cout, Cin, kh, kw]`.
pub fn conv2d_geometry(
    x: &[usize],
    w: &[usize],
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<ConvGeometry> {
    check_rank4("conv2d", x)?;
    check_rank4("conv2d", w)?;
    if x[1] != w[1] {
        return Err(CoalaError::shape("conv2d", x, w));
    }
    ConvGeometry::new(x[1], x[2], x[3], (w[2], w[3]), stride, pad)
        .ok_or_else(|| CoalaError::shape("conv2d", x, w))
}

/// Geometry of the convolution whose input-gradient a transposed convolution
/// with input `[B, Cin, H, W]` and weights `[Cin, Cout, kh, kw]` computes.
/// The geometry's "image" is the transposed convolution's output.
pub fn conv_transpose2d_geometry(
    x: &[usize],
    w: &[usize],
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<ConvGeometry> {
    check_rank4("conv_transpose2d", x)?;
    check_rank4("conv_transpose2d", w)?;
    if x[1] != w[0] {
        return Err(CoalaError::shape("conv_transpose2d", x, w));
    }
    let err = || CoalaError::shape("conv_transpose2d", x, w);
    let out_h = conv_transpose_output_len(x[2], w[2], stride.0, pad.0).ok_or_else(err)?;
    let out_w = conv_transpose_output_len(x[3], w[3], stride.1, pad.1).ok_or_else(err)?;
    let g = ConvGeometry::new(w[1], out_h, out_w, (w[2], w[3]), stride, pad).ok_or_else(err)?;
    if g.out_h != x[2] || g.out_w != x[3] {
        return Err(err());
    }
    Ok(g)
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: Option<&Tensor<T>>, plane: usize) {
    if let Some(b) = bias {
        for (ch, &bv) in out.chunks_mut(plane).zip(b.data()) {
            for v in ch {
                *v += bv;
            }
        }
    }
}

fn channel_bias_grad<T: Scalar>(dy: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for b in 0..batch {
        for (c, acc) in db.iter_mut().enumerate() {
            let start = (b * channels + c) * plane;
            *acc += dy[start..start + plane].iter().copied().sum::<T>();
        }
    }
    db
}

fn reduce_partials<T: Scalar>(partials: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut total = vec![T::zero(); len];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor<T>> {
    let g = conv2d_geometry(x.shape(), w.shape(), stride, pad)?;
    let (batch, cout) = (x.shape()[0], w.shape()[0]);
    check_bias("conv2d", bias, cout)?;
    let ohw = g.col_cols();
    let mut out = vec![T::zero(); batch * cout * ohw];
    let wm = Mat::rm(w.data(), cout, g.col_rows());
    out.par_chunks_mut(cout * ohw)
        .zip(x.data().par_chunks(g.image_len()))
        .for_each(|(y, img)| {
            let mut cols = vec![T::zero(); g.col_rows() * ohw];
            im2col(img, &g, &mut cols);
            matmul_into(wm, Mat::rm(&cols, g.col_rows(), ohw), T::zero(), y);
            add_channel_bias(y, bias, ohw);
        });
    Tensor::new(&[batch, cout, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d`]: `(d input, d weight, d bias)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: (usize, usize),
    pad: (usize, usize),
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = conv2d_geometry(x.shape(), w.shape(), stride, pad)?;
    let (batch, cout) = (x.shape()[0], w.shape()[0]);
    let ohw = g.col_cols();
    if dy.shape() != [batch, cout, g.out_h, g.out_w] {
        return Err(CoalaError::shape(
            "conv2d_backward",
            dy.shape(),
            &[batch, cout, g.out_h, g.out_w],
        ));
    }
    let krows = g.col_rows();
    let wm = Mat::rm(w.data(), cout, krows);
    let mut dx = vec![T::zero(); if need_dx { x.numel() } else { 0 }];
    let chunk_in = REDUCE_CHUNK * g.image_len();
    let chunk_out = REDUCE_CHUNK * cout * ohw;

    let work = |x_chunk: &[T], dy_chunk: &[T], mut dx_chunk: Option<&mut [T]>| -> Vec<T> {
        let mut dw = vec![T::zero(); cout * krows];
        let mut cols = vec![T::zero(); krows * ohw];
        for (s, (img, dys)) in x_chunk
            .chunks(g.image_len())
            .zip(dy_chunk.chunks(cout * ohw))
            .enumerate()
        {
            im2col(img, &g, &mut cols);
            let dym = Mat::rm(dys, cout, ohw);
            matmul_into(dym, Mat::rm(&cols, krows, ohw).t(), T::one(), &mut dw);
            if let Some(dxc) = dx_chunk.as_deref_mut() {
                matmul_into(wm.t(), dym, T::zero(), &mut cols);
                col2im(&cols, &g, &mut dxc[s * g.image_len()..(s + 1) * g.image_len()]);
            }
        }
        dw
    };

    let partials: Vec<Vec<T>> = if need_dx {
        dx.par_chunks_mut(chunk_in)
            .zip(x.data().par_chunks(chunk_in))
            .zip(dy.data().par_chunks(chunk_out))
            .map(|((dxc, xc), dyc)| work(xc, dyc, Some(dxc)))
            .collect()
    } else {
        x.data()
            .par_chunks(chunk_in)
            .zip(dy.data().par_chunks(chunk_out))
            .map(|(xc, dyc)| work(xc, dyc, None))
            .collect()
    };
    let dw = reduce_partials(partials, cout * krows);
    let db = channel_bias_grad(dy.data(), batch, cout, ohw);
    let dx = if need_dx {
        Some(Tensor::new(x.shape(), dx)?)
    } else {
        None
    };
    Ok((dx, Tensor::new(w.shape(), dw)?, Tensor::new(&[cout], db)?))
}

pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor<T>> {
    let g = conv_transpose2d_geometry(x.shape(), w.shape(), stride, pad)?;
    let (batch, cin, cout) = (x.shape()[0], w.shape()[0], w.shape()[1]);
    check_bias("conv_transpose2d", bias, cout)?;
    let hw = g.col_cols();
    let krows = g.col_rows();
    let wm = Mat::rm(w.data(), cin, krows);
    let mut out = vec![T::zero(); batch * g.image_len()];
    out.par_chunks_mut(g.image_len())
        .zip(x.data().par_chunks(cin * hw))
        .for_each(|(y, xs)| {
            let mut cols = vec![T::zero(); krows * hw];
            matmul_into(wm.t(), Mat::rm(xs, cin, hw), T::zero(), &mut cols);
            col2im(&cols, &g, y);
            add_channel_bias(y, bias, g.in_h * g.in_w);
        });
    Tensor::new(&[batch, cout, g.in_h, g.in_w], out)
}

/// Gradients of [`conv_transpose2d`]: `(d input, d weight, d bias)`.
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: (usize, usize),
    pad: (usize, usize),
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = conv_transpose2d_geometry(x.shape(), w.shape(), stride, pad)?;
    let (batch, cin, cout) = (x.shape()[0], w.shape()[0], w.shape()[1]);
    if dy.shape() != [batch, cout, g.in_h, g.in_w] {
        return Err(CoalaError::shape(
            "conv_transpose2d_backward",
            dy.shape(),
            &[batch, cout, g.in_h, g.in_w],
        ));
    }
    let hw = g.col_cols();
    let krows = g.col_rows();
    let wm = Mat::rm(w.data(), cin, krows);
    let mut dx = vec![T::zero(); if need_dx { x.numel() } else { 0 }];
    let chunk_in = REDUCE_CHUNK * cin * hw;
    let chunk_out = REDUCE_CHUNK * g.image_len();

    let work = |x_chunk: &[T], dy_chunk: &[T], mut dx_chunk: Option<&mut [T]>| -> Vec<T> {
        let mut dw = vec![T::zero(); cin * krows];
        let mut cols = vec![T::zero(); krows * hw];
        for (s, (xs, dys)) in x_chunk
            .chunks(cin * hw)
            .zip(dy_chunk.chunks(g.image_len()))
            .enumerate()
        {
            im2col(dys, &g, &mut cols);
            let dcols = Mat::rm(&cols, krows, hw);
            matmul_into(Mat::rm(xs, cin, hw), dcols.t(), T::one(), &mut dw);
            if let Some(dxc) = dx_chunk.as_deref_mut() {
                matmul_into(wm, dcols, T::zero(), &mut dxc[s * cin * hw..(s + 1) * cin * hw]);
            }
        }
        dw
    };

    let partials: Vec<Vec<T>> = if need_dx {
        dx.par_chunks_mut(chunk_in)
            .zip(x.data().par_chunks(chunk_in))
            .zip(dy.data().par_chunks(chunk_out))
            .map(|((dxc, xc), dyc)| work(xc, dyc, Some(dxc)))
            .collect()
    } else {
        x.data()
            .par_chunks(chunk_in)
            .zip(dy.data().par_chunks(chunk_out))
            .map(|(xc, dyc)| work(xc, dyc, None))
            .collect()
    };
    let dw = reduce_partials(partials, cin * krows);
    let db = channel_bias_grad(dy.data(), batch, cout, g.in_h * g.in_w);
    let dx = if need_dx {
        Some(Tensor::new(x.shape(), dx)?)
    } else {
        None
    };
    Ok((dx, Tensor::new(w.shape(), dw)?, Tensor::new(&[cout], db)?))
}

/// `y = x w^T + b` for `x: [B, in]`, `w: [out, in]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] {
        return Err(CoalaError::shape("linear", x.shape(), w.shape()));
    }
    let (batch, fin, fout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    check_bias("linear", bias, fout)?;
    let mut out = vec![T::zero(); batch * fout];
    matmul_into(
        Mat::rm(x.data(), batch, fin),
        Mat::rm(w.data(), fout, fin).t(),
        T::zero(),
        &mut out,
    );
    if let Some(b) = bias {
        for row in out.chunks_mut(fout) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    Tensor::new(&[batch, fout], out)
}

/// Gradients of [`linear`]: `(d input, d weight, d bias)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (batch, fin, fout) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    if dy.shape() != [batch, fout] {
        return Err(CoalaError::shape("linear_backward", dy.shape(), &[batch, fout]));
    }
    let dym = Mat::rm(dy.data(), batch, fout);
    let dx = if need_dx {
        let mut dx = vec![T::zero(); batch * fin];
        matmul_into(dym, Mat::rm(w.data(), fout, fin), T::zero(), &mut dx);
        Some(Tensor::new(&[batch, fin], dx)?)
    } else {
        None
    };
    let mut dw = vec![T::zero(); fout * fin];
    matmul_into(dym.t(), Mat::rm(x.data(), batch, fin), T::zero(), &mut dw);
    let mut db = vec![T::zero(); fout];
    for row in dy.data().chunks(fout) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok((dx, Tensor::new(&[fout, fin], dw)?, Tensor::new(&[fout], db)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        let oh = (h + 2 * p - k) / s + 1;
        let ow = (wd + 2 * p - k) / s + 1;
        let mut out = Tensor::zeros(&[b, cout, oh, ow]);
        for n in 0..b {
            for o in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..cin {
                            for i in 0..k {
                                for j in 0..k {
                                    let iy = (oy * s + i) as isize - p as isize;
                                    let ix = (ox * s + j) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((n * cin + c) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((o * cin + c) * k + i) * k + j];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((n * cout + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[3, 2, 7, 6], &mut rng);
        let w = random(&[4, 2, 3, 3], &mut rng);
        let fast = conv2d(&x, &w, None, (2, 2), (1, 1)).unwrap();
        let slow = naive_conv(&x, &w, 2, 1);
        assert_eq!(fast.shape(), slow.shape());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ones_kernel_sums_window() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f32>::full(&[1, 1, 2, 2], 1.0);
        let y = conv2d(&x, &w, None, (1, 1), (0, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn encoder_geometry_shapes() {
        assert_eq!(conv_output_len(96, 4, 2, 1), Some(48));
        assert_eq!(conv_transpose_output_len(3, 4, 2, 1), Some(6));
        let mut n = 3;
        for _ in 0..5 {
            n = conv_transpose_output_len(n, 4, 2, 1).unwrap();
        }
        assert_eq!(n, 96);
        assert_eq!(conv_output_len(2, 4, 1, 0), None);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 2, 8, 8]);
        let w = Tensor::<f32>::zeros(&[4, 3, 4, 4]);
        let msg = conv2d(&x, &w, None, (2, 2), (1, 1)).unwrap_err().to_string();
        assert!(msg.contains("[1, 2, 8, 8]") && msg.contains("[4, 3, 4, 4]"), "{msg}");
    }

    #[test]
    fn linear_matches_manual() {
        let x = Tensor::<f64>::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::<f64>::new(&[2, 2], vec![1.0, 0.5, -1.0, 3.0]).unwrap();
        let b = Tensor::<f64>::new(&[2], vec![0.25, -0.5]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.data(), &[2.25, 4.5]);
    }

    #[test]
    fn backward_independent_of_batch_chunking() {
        // batch sizes around the chunk size exercise the partial reduction path
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for batch in [1, 4, 5, 9] {
            let x = random(&[batch, 2, 6, 6], &mut rng);
            let w = random(&[3, 2, 4, 4], &mut rng);
            let y = conv2d(&x, &w, None, (2, 2), (1, 1)).unwrap();
            let dy = random(y.shape(), &mut rng);
            let (_, dw, _) = conv2d_backward(&x, &w, &dy, (2, 2), (1, 1), false).unwrap();
            let mut expect = vec![0.0; dw.numel()];
            for n in 0..batch {
                let xs = Tensor::new(&[1, 2, 6, 6], x.data()[n * 72..(n + 1) * 72].to_vec()).unwrap();
                let ds = Tensor::new(&[1, 3, 3, 3], dy.data()[n * 27..(n + 1) * 27].to_vec()).unwrap();
                let (_, d, _) = conv2d_backward(&xs, &w, &ds, (2, 2), (1, 1), false).unwrap();
                for (e, v) in expect.iter_mut().zip(d.data()) {
                    *e += v;
                }
            }
            for (a, b) in dw.data().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
