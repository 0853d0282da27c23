//! Horizontal bilinear warping by a per-pixel disparity field.
//!
//! Output pixel `(x, y)` samples the source at `x - d(x, y)` on the same row.
//! Sampling coordinates are clamped to `[0, W-1]`; the disparity gradient is
//! zero wherever the clamp is active.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{Scalar, Shape};

#[derive(Clone, Copy)]
struct Tap<T> {
    x0: usize,
    x1: usize,
    frac: T,
    clamped: bool,
}

fn tap<T: Scalar>(x: usize, d: T, w: usize) -> Tap<T> {
    let max = T::of((w - 1) as f64);
    let raw = T::of(x as f64) - d;
    let (u, clamped) = if raw.is_nan() || raw <= T::zero() {
        (T::zero(), true)
    } else if raw >= max {
        (max, true)
    } else {
        (raw, false)
    };
    let x0 = u.floor().to_usize().unwrap_or(0).min(w - 1);
    let x1 = (x0 + 1).min(w - 1);
    Tap {
        x0,
        x1,
        frac: u - T::of(x0 as f64),
        clamped,
    }
}

pub(crate) fn forward<T: Scalar>(source: &[T], s: Shape, disparity: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); s.len()];
    let (h, w) = (s.h, s.w);
    for n in 0..s.n {
        for y in 0..h {
            let drow = &disparity[(n * h + y) * w..(n * h + y + 1) * w];
            let taps: Vec<Tap<T>> = drow.iter().enumerate().map(|(x, &d)| tap(x, d, w)).collect();
            for c in 0..s.c {
                let row = ((n * s.c + c) * h + y) * w;
                let src = &source[row..row + w];
                for (o, t) in out[row..row + w].iter_mut().zip(&taps) {
                    *o = src[t.x0] * (T::one() - t.frac) + src[t.x1] * t.frac;
                }
            }
        }
    }
    out
}

pub(crate) fn backward<T: Scalar>(
    source: &[T],
    s: Shape,
    disparity: &[T],
    grad_out: &[T],
    mut grad_source: Option<&mut [T]>,
    mut grad_disp: Option<&mut [T]>,
) {
    let (h, w) = (s.h, s.w);
    for n in 0..s.n {
        for y in 0..h {
            let drow_at = (n * h + y) * w;
            let taps: Vec<Tap<T>> = disparity[drow_at..drow_at + w]
                .iter()
                .enumerate()
                .map(|(x, &d)| tap(x, d, w))
                .collect();
            for c in 0..s.c {
                let row = ((n * s.c + c) * h + y) * w;
                let g = &grad_out[row..row + w];
                if let Some(gs) = grad_source.as_deref_mut() {
                    let gs = &mut gs[row..row + w];
                    for (t, &gv) in taps.iter().zip(g) {
                        gs[t.x0] += gv * (T::one() - t.frac);
                        gs[t.x1] += gv * t.frac;
                    }
                }
                if let Some(gd) = grad_disp.as_deref_mut() {
                    let src = &source[row..row + w];
                    let gd = &mut gd[drow_at..drow_at + w];
                    for ((t, &gv), o) in taps.iter().zip(g).zip(gd.iter_mut()) {
                        if !t.clamped {
                            // d(out)/d(d) = -(src[x1] - src[x0])
                            *o -= gv * (src[t.x1] - src[t.x0]);
                        }
                    }
                }
            }
        }
    }
}
