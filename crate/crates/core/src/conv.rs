//! Convolution geometry and the im2col/GEMM kernels behind `conv2d` and
//! `transpose_conv2d`.
//!
//! Weights follow the usual layouts: a forward convolution stores
//! `(out, in, k, k)`, a transposed convolution stores `(in, out, k, k)`. With
//! that convention a transposed convolution is the exact adjoint of the
//! forward convolution that shares its weight buffer.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape};

/// Hyper-parameters of one (de)convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub transposed: bool,
}

impl ConvSpec {
    pub const fn conv(kernel: usize, stride: usize, padding: usize, cin: usize, cout: usize) -> Self {
        ConvSpec {
            kernel,
            stride,
            padding,
            in_channels: cin,
            out_channels: cout,
            transposed: false,
        }
    }

    pub const fn deconv(kernel: usize, stride: usize, padding: usize, cin: usize, cout: usize) -> Self {
        ConvSpec {
            kernel,
            stride,
            padding,
            in_channels: cin,
            out_channels: cout,
            transposed: true,
        }
    }

    /// Same-size convolution with `p = floor(k/2)`.
    pub const fn same(kernel: usize, stride: usize, cin: usize, cout: usize) -> Self {
        ConvSpec::conv(kernel, stride, kernel / 2, cin, cout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config(
                "conv",
                alloc::format!("kernel, stride and channel counts must be positive: {self:?}"),
            ));
        }
        Ok(())
    }

    /// Output extent along one spatial axis, or `None` when the layer would
    /// produce an empty output.
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        if input == 0 {
            return None;
        }
        if self.transposed {
            let full = (input - 1) * s + k;
            (full > 2 * p).then(|| full - 2 * p)
        } else {
            let padded = input + 2 * p;
            (padded >= k).then(|| (padded - k) / s + 1)
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.validate()?;
        if input.c != self.in_channels {
            return Err(Error::shape(
                if self.transposed { "transpose_conv2d" } else { "conv2d" },
                alloc::format!("input has {} channels, layer expects {}", input.c, self.in_channels),
            ));
        }
        match (self.output_extent(input.h), self.output_extent(input.w)) {
            (Some(h), Some(w)) => Ok(Shape::new(input.n, self.out_channels, h, w)),
            _ => Err(Error::config(
                "conv",
                alloc::format!("zero-sized output for {}x{} input with {self:?}", input.h, input.w),
            )),
        }
    }

    pub fn weight_shape(&self) -> Shape {
        let k = self.kernel;
        if self.transposed {
            Shape::new(self.in_channels, self.out_channels, k, k)
        } else {
            Shape::new(self.out_channels, self.in_channels, k, k)
        }
    }

    /// Learnable scalars: weights plus one bias per output channel.
    pub fn parameter_count(&self) -> usize {
        self.weight_shape().len() + self.out_channels
    }

    /// Number of inputs feeding one output element, used for initialisation.
    pub fn fan_in(&self) -> usize {
        let taps = self.in_channels * self.kernel * self.kernel;
        if self.transposed {
            (taps / (self.stride * self.stride)).max(1)
        } else {
            taps
        }
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Spatial layout shared by im2col and col2im: an image of `c×h×w` scanned by
/// a `k×k` window with stride `s` and padding `p`, producing a `gh×gw` grid.
#[derive(Debug, Clone, Copy)]
struct Window {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    gh: usize,
    gw: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.gh * self.gw
    }

    /// Range of grid columns whose tap `kx` lands inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.s, self.p);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        // ox*s + kx - p <= w - 1
        let hi = if self.w + p < kx + 1 {
            0
        } else {
            ((self.w + p - kx - 1) / s + 1).min(self.gw)
        };
        (lo.min(hi), hi)
    }

    fn source_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = oy * self.s + ky;
        (iy >= self.p && iy - self.p < self.h).then(|| iy - self.p)
    }
}

/// Borrows `len` values of a reusable buffer; contents are unspecified.
fn scratch<T: Scalar>(buf: &mut Vec<T>, len: usize) -> &mut [T] {
    if buf.len() < len {
        buf.resize(len, T::zero());
    }
    &mut buf[..len]
}

fn im2col<T: Scalar>(img: &[T], win: &Window, col: &mut [T]) {
    let plane = win.cols();
    for ci in 0..win.c {
        let src_plane = &img[ci * win.h * win.w..(ci + 1) * win.h * win.w];
        for ky in 0..win.k {
            for kx in 0..win.k {
                let row = ((ci * win.k + ky) * win.k + kx) * plane;
                let (lo, hi) = win.valid_cols(kx);
                for oy in 0..win.gh {
                    let dst = &mut col[row + oy * win.gw..row + (oy + 1) * win.gw];
                    let Some(iy) = win.source_row(oy, ky) else {
                        dst.fill(T::zero());
                        continue;
                    };
                    let src = &src_plane[iy * win.w..(iy + 1) * win.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if lo < hi {
                        let start = lo * win.s + kx - win.p;
                        if win.s == 1 {
                            dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                                *d = src[start + j * win.s];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back into the image (adjoint of `im2col`).
fn col2im<T: Scalar>(col: &[T], win: &Window, img: &mut [T]) {
    let plane = win.cols();
    for ci in 0..win.c {
        let dst_plane = &mut img[ci * win.h * win.w..(ci + 1) * win.h * win.w];
        for ky in 0..win.k {
            for kx in 0..win.k {
                let row = ((ci * win.k + ky) * win.k + kx) * plane;
                let (lo, hi) = win.valid_cols(kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..win.gh {
                    let Some(iy) = win.source_row(oy, ky) else {
                        continue;
                    };
                    let src = &col[row + oy * win.gw + lo..row + oy * win.gw + hi];
                    let dst = &mut dst_plane[iy * win.w..(iy + 1) * win.w];
                    let start = lo * win.s + kx - win.p;
                    if win.s == 1 {
                        for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in src.iter().enumerate() {
                            dst[start + j * win.s] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolutions with at most this many output channels skip
/// im2col: packing a tall column matrix for a handful of output rows costs
/// more than the arithmetic. The backward pass keeps the GEMM path, which
/// measured faster even for a single output channel.
const DIRECT_MAX_OUT: usize = 4;

/// Visits every in-bounds row segment of tap `(ky, kx)`: output row `oy`,
/// input row `iy`, output columns `lo..hi` and the first input column.
fn for_each_segment(win: &Window, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let (lo, hi) = win.valid_cols(kx);
    if lo >= hi {
        return;
    }
    let start = lo * win.s + kx - win.p;
    for oy in 0..win.gh {
        if let Some(iy) = win.source_row(oy, ky) {
            f(oy, iy, lo, hi, start);
        }
    }
}

/// `out += w ⋆ x` for one item, looping over taps instead of building columns.
fn direct_forward<T: Scalar>(x: &[T], w: &[T], win: &Window, cout: usize, out: &mut [T]) {
    let (k, plane, cols) = (win.k, win.h * win.w, win.cols());
    for co in 0..cout {
        let dst_plane = &mut out[co * cols..(co + 1) * cols];
        for ci in 0..win.c {
            let src_plane = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((co * win.c + ci) * k + ky) * k + kx];
                    for_each_segment(win, ky, kx, |oy, iy, lo, hi, start| {
                        let dst = &mut dst_plane[oy * win.gw + lo..oy * win.gw + hi];
                        let src = &src_plane[iy * win.w..(iy + 1) * win.w];
                        if win.s == 1 {
                            for (d, &v) in dst.iter_mut().zip(&src[start..start + hi - lo]) {
                                *d += wv * v;
                            }
                        } else {
                            for (j, d) in dst.iter_mut().enumerate() {
                                *d += wv * src[start + j * win.s];
                            }
                        }
                    });
                }
            }
        }
    }
}

/// `c (m×n) (+)= a (m×k) · b (k×n)`, all row-major.
fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], acc: bool) {
    let beta = if acc { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1);
}

/// `c (m×n) (+)= aᵀ · b` where `a` is stored as k×m.
fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], acc: bool) {
    let beta = if acc { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, 1, m as isize, b, n as isize, 1, beta, c, n as isize, 1);
}

/// `c (m×n) (+)= a · bᵀ` where `b` is stored as n×k.
fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], acc: bool) {
    let beta = if acc { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, k as isize, 1, b, 1, k as isize, beta, c, n as isize, 1);
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (row, &b) in out.chunks_mut(plane).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Scalar>(grad_out: &[T], plane: usize, channels: usize, grad_bias: &mut [T]) {
    for item in grad_out.chunks(plane * channels) {
        for (row, gb) in item.chunks(plane).zip(grad_bias.iter_mut()) {
            *gb += row.iter().copied().sum::<T>();
        }
    }
}

/// Window scanning the forward-convolution input (or the transposed
/// convolution output) with the grid of the other side.
fn conv_window(spec: &ConvSpec, image: Shape, grid: Shape) -> Window {
    Window {
        c: image.c,
        h: image.h,
        w: image.w,
        k: spec.kernel,
        s: spec.stride,
        p: spec.padding,
        gh: grid.h,
        gw: grid.w,
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    spec: &ConvSpec,
    x: &[T],
    xs: Shape,
    w: &[T],
    b: &[T],
    os: Shape,
    buf: &mut Vec<T>,
) -> Vec<T> {
    let mut out = vec![T::zero(); os.len()];
    let win = conv_window(spec, xs, os);
    let (rows, cols) = (win.rows(), win.cols());
    let direct = os.c <= DIRECT_MAX_OUT;
    let col = scratch(buf, if spec.pointwise() || direct { 0 } else { rows * cols });
    for n in 0..xs.n {
        let xn = &x[n * xs.item()..(n + 1) * xs.item()];
        let on = &mut out[n * os.item()..(n + 1) * os.item()];
        if direct {
            direct_forward(xn, w, &win, os.c, on);
            add_bias(on, b, cols);
            continue;
        }
        let src = if spec.pointwise() {
            xn
        } else {
            im2col(xn, &win, col);
            &*col
        };
        gemm_nn(os.c, rows, cols, w, src, on, false);
        add_bias(on, b, cols);
    }
    out
}

/// Accumulates input, weight and bias gradients of a forward convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    spec: &ConvSpec,
    x: &[T],
    xs: Shape,
    w: &[T],
    grad_out: &[T],
    os: Shape,
    grad_x: Option<&mut [T]>,
    grad_w: Option<&mut [T]>,
    grad_b: Option<&mut [T]>,
    buf: &mut Vec<T>,
) {
    let win = conv_window(spec, xs, os);
    let (rows, cols) = (win.rows(), win.cols());
    if let Some(gb) = grad_b {
        bias_grad(grad_out, cols, os.c, gb);
    }
    let col = scratch(buf, if spec.pointwise() { 0 } else { rows * cols });
    if let Some(gw) = grad_w {
        for n in 0..xs.n {
            let xn = &x[n * xs.item()..(n + 1) * xs.item()];
            let gon = &grad_out[n * os.item()..(n + 1) * os.item()];
            let src = if spec.pointwise() {
                xn
            } else {
                im2col(xn, &win, col);
                &*col
            };
            gemm_nt(os.c, cols, rows, gon, src, gw, true);
        }
    }
    if let Some(gx) = grad_x {
        for n in 0..xs.n {
            let gon = &grad_out[n * os.item()..(n + 1) * os.item()];
            let gxn = &mut gx[n * xs.item()..(n + 1) * xs.item()];
            if spec.pointwise() {
                gemm_tn(rows, os.c, cols, w, gon, gxn, true);
            } else {
                gemm_tn(rows, os.c, cols, w, gon, col, false);
                col2im(col, &win, gxn);
            }
        }
    }
}

pub(crate) fn deconv2d_forward<T: Scalar>(
    spec: &ConvSpec,
    x: &[T],
    xs: Shape,
    w: &[T],
    b: &[T],
    os: Shape,
    buf: &mut Vec<T>,
) -> Vec<T> {
    let mut out = vec![T::zero(); os.len()];
    let win = conv_window(spec, os, xs);
    let (rows, cols) = (win.rows(), win.cols());
    let col = scratch(buf, rows * cols);
    for n in 0..xs.n {
        let xn = &x[n * xs.item()..(n + 1) * xs.item()];
        let on = &mut out[n * os.item()..(n + 1) * os.item()];
        gemm_tn(rows, xs.c, cols, w, xn, col, false);
        col2im(col, &win, on);
        add_bias(on, b, os.plane());
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn deconv2d_backward<T: Scalar>(
    spec: &ConvSpec,
    x: &[T],
    xs: Shape,
    w: &[T],
    grad_out: &[T],
    os: Shape,
    mut grad_x: Option<&mut [T]>,
    mut grad_w: Option<&mut [T]>,
    grad_b: Option<&mut [T]>,
    buf: &mut Vec<T>,
) {
    let win = conv_window(spec, os, xs);
    let (rows, cols) = (win.rows(), win.cols());
    let col = scratch(buf, rows * cols);
    if let Some(gb) = grad_b {
        bias_grad(grad_out, os.plane(), os.c, gb);
    }
    if grad_x.is_none() && grad_w.is_none() {
        return;
    }
    for n in 0..xs.n {
        let gon = &grad_out[n * os.item()..(n + 1) * os.item()];
        im2col(gon, &win, col);
        if let Some(gx) = grad_x.as_deref_mut() {
            gemm_nn(xs.c, rows, cols, w, col, &mut gx[n * xs.item()..(n + 1) * xs.item()], true);
        }
        if let Some(gw) = grad_w.as_deref_mut() {
            let xn = &x[n * xs.item()..(n + 1) * xs.item()];
            gemm_nt(xs.c, cols, rows, xn, col, gw, true);
        }
    }
}
