//! One-sided horizontal correlation between two feature maps.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape};

/// Parameters of the correlation layer. Only `patch = 1` and unit strides
/// are supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorrSpec {
    pub max_displacement: usize,
    pub patch: usize,
    pub stride1: usize,
    pub stride2: usize,
}

impl CorrSpec {
    pub const fn new(max_displacement: usize) -> Self {
        CorrSpec {
            max_displacement,
            patch: 1,
            stride1: 1,
            stride2: 1,
        }
    }

    /// One output channel per displacement `0..=D`.
    pub const fn channels(&self) -> usize {
        self.max_displacement + 1
    }

    pub fn output_shape(&self, left: Shape, right: Shape) -> Result<Shape> {
        if self.patch != 1 || self.stride1 != 1 || self.stride2 != 1 {
            return Err(Error::Unsupported(alloc::format!(
                "correlation with patch {} and strides {}/{}",
                self.patch,
                self.stride1,
                self.stride2
            )));
        }
        if left != right {
            return Err(Error::shape("correlation_1d", alloc::format!("left {left} vs right {right}")));
        }
        if self.max_displacement >= left.w {
            return Err(Error::config(
                "correlation_1d",
                alloc::format!("max displacement {} >= width {}", self.max_displacement, left.w),
            ));
        }
        Ok(left.with_c(self.channels()))
    }
}

/// `out[n,d,y,x] = (1/C) Σ_c left[n,c,y,x] · right[n,c,y,x-d]`, zero where `x < d`.
pub(crate) fn forward<T: Scalar>(left: &[T], right: &[T], s: Shape, max_disp: usize) -> Vec<T> {
    let os = s.with_c(max_disp + 1);
    let mut out = vec![T::zero(); os.len()];
    let (h, w) = (s.h, s.w);
    let norm = T::one() / T::of(s.c as f64);
    for n in 0..s.n {
        let on = &mut out[n * os.item()..(n + 1) * os.item()];
        for c in 0..s.c {
            let base = (n * s.c + c) * h * w;
            let lp = &left[base..base + h * w];
            let rp = &right[base..base + h * w];
            for d in 0..=max_disp {
                let od = &mut on[d * h * w..(d + 1) * h * w];
                for y in 0..h {
                    let lrow = &lp[y * w + d..(y + 1) * w];
                    let rrow = &rp[y * w..(y + 1) * w - d];
                    let orow = &mut od[y * w + d..(y + 1) * w];
                    for ((o, &l), &r) in orow.iter_mut().zip(lrow).zip(rrow) {
                        *o += l * r;
                    }
                }
            }
        }
        on.iter_mut().for_each(|v| *v *= norm);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    left: &[T],
    right: &[T],
    s: Shape,
    max_disp: usize,
    grad_out: &[T],
    mut grad_left: Option<&mut [T]>,
    mut grad_right: Option<&mut [T]>,
) {
    let os = s.with_c(max_disp + 1);
    let (h, w) = (s.h, s.w);
    let norm = T::one() / T::of(s.c as f64);
    for n in 0..s.n {
        let gn = &grad_out[n * os.item()..(n + 1) * os.item()];
        for c in 0..s.c {
            let base = (n * s.c + c) * h * w;
            for d in 0..=max_disp {
                let gd = &gn[d * h * w..(d + 1) * h * w];
                for y in 0..h {
                    let grow = &gd[y * w + d..(y + 1) * w];
                    if let Some(gl) = grad_left.as_deref_mut() {
                        let rrow = &right[base + y * w..base + (y + 1) * w - d];
                        let glrow = &mut gl[base + y * w + d..base + (y + 1) * w];
                        for ((o, &g), &r) in glrow.iter_mut().zip(grow).zip(rrow) {
                            *o += g * r * norm;
                        }
                    }
                    if let Some(gr) = grad_right.as_deref_mut() {
                        let lrow = &left[base + y * w + d..base + (y + 1) * w];
                        let grrow = &mut gr[base + y * w..base + (y + 1) * w - d];
                        for ((o, &g), &l) in grrow.iter_mut().zip(grow).zip(lrow) {
                            *o += g * l * norm;
                        }
                    }
                }
            }
        }
    }
}
