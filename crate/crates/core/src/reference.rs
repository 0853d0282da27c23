//! Brute-force loop references for the tensor kernels, evaluated in 64-bit,
//! and a randomized suite comparing the 32-bit tape operators against them.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::ConvSpec;
use crate::correlation::CorrSpec;
use crate::error::Result;
use crate::tape::Tape;
use crate::tensor::{Shape, Tensor};

/// Direct convolution: every output accumulates its `cin·k·k` taps.
pub fn conv2d(spec: &ConvSpec, x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Result<Tensor<f64>> {
    let xs = x.shape();
    let os = spec.output_shape(xs)?;
    let (k, s, p) = (spec.kernel as isize, spec.stride as isize, spec.padding as isize);
    Ok(Tensor::from_fn(os, |n, co, oy, ox| {
        let mut acc = b[co];
        for ci in 0..xs.c {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = oy as isize * s + ky - p;
                    let ix = ox as isize * s + kx - p;
                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                        acc += x.at(n, ci, iy as usize, ix as usize) * w.at(co, ci, ky as usize, kx as usize);
                    }
                }
            }
        }
        acc
    }))
}

/// Transposed convolution in scatter form: every input pixel stamps its
/// weighted kernel onto the stride-spaced output grid.
pub fn transpose_conv2d(spec: &ConvSpec, x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Result<Tensor<f64>> {
    let xs = x.shape();
    let os = spec.output_shape(xs)?;
    let mut out = Tensor::from_fn(os, |_, co, _, _| b[co]);
    let (k, s, p) = (spec.kernel as isize, spec.stride as isize, spec.padding as isize);
    for n in 0..xs.n {
        for ci in 0..xs.c {
            for iy in 0..xs.h {
                for ix in 0..xs.w {
                    let v = x.at(n, ci, iy, ix);
                    for co in 0..os.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let oy = iy as isize * s + ky - p;
                                let ox = ix as isize * s + kx - p;
                                if oy >= 0 && ox >= 0 && (oy as usize) < os.h && (ox as usize) < os.w {
                                    let (oy, ox) = (oy as usize, ox as usize);
                                    let cur = out.at(n, co, oy, ox);
                                    out.set(n, co, oy, ox, cur + v * w.at(ci, co, ky as usize, kx as usize));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Channel-averaged product of the left pixel with the right pixel `d`
/// columns to its left, for `d` in `0..=D`; zero where `x < d`.
pub fn correlation_1d(left: &Tensor<f64>, right: &Tensor<f64>, max_disp: usize) -> Tensor<f64> {
    let s = left.shape();
    Tensor::from_fn(s.with_c(max_disp + 1), |n, d, y, x| {
        if x < d {
            return 0.0;
        }
        let sum: f64 = (0..s.c).map(|c| left.at(n, c, y, x) * right.at(n, c, y, x - d)).sum();
        sum / s.c as f64
    })
}

/// Linear interpolation of the source row at `x − d`, clamped to the row.
pub fn warp_horizontal(source: &Tensor<f64>, disparity: &Tensor<f64>) -> Tensor<f64> {
    let s = source.shape();
    Tensor::from_fn(s, |n, c, y, x| {
        let u = (x as f64 - disparity.at(n, 0, y, x)).clamp(0.0, (s.w - 1) as f64);
        let x0 = num_traits::Float::floor(u) as usize;
        let x1 = (x0 + 1).min(s.w - 1);
        let t = u - x0 as f64;
        source.at(n, c, y, x0) * (1.0 - t) + source.at(n, c, y, x1) * t
    })
}

/// Outcome of one operator in [`oracle_suite`].
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub name: &'static str,
    pub instances: usize,
    /// Largest absolute difference between the 32-bit operator and the
    /// 64-bit reference over all instances.
    pub max_error: f64,
}

/// Multiples of 1/16 in `[-1, 1]`. Products and partial sums of such values
/// are exact in 32-bit, so any summation order reproduces the reference and
/// a misplaced tap shows up as an error of at least 1/256.
fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| grid_value(rng))
}

fn grid_value(rng: &mut ChaCha8Rng) -> f64 {
    rng.gen_range(-16i32..=16) as f64 / 16.0
}

fn max_error(actual: &Tensor<f32>, expected: &Tensor<f64>) -> f64 {
    assert_eq!(actual.shape(), expected.shape());
    actual
        .data()
        .iter()
        .zip(expected.data())
        .map(|(&a, &e)| (a as f64 - e).abs())
        .fold(0.0, f64::max)
}

/// Random small (de)convolution geometry with a non-empty output.
fn random_conv(rng: &mut ChaCha8Rng, transposed: bool) -> (ConvSpec, Shape) {
    loop {
        let k = rng.gen_range(1..=5);
        let s = rng.gen_range(1..=3);
        let p = rng.gen_range(0..k);
        let cin = rng.gen_range(1..=4);
        // Both sides of the narrow-output threshold get exercised.
        let cout = rng.gen_range(1..=9);
        let spec = if transposed {
            ConvSpec::deconv(k, s, p, cin, cout)
        } else {
            ConvSpec::conv(k, s, p, cin, cout)
        };
        let shape = Shape::new(rng.gen_range(1..=2), cin, rng.gen_range(1..=9), rng.gen_range(1..=9));
        if spec.output_shape(shape).is_ok() {
            return (spec, shape);
        }
    }
}

fn run_conv(spec: &ConvSpec, x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Result<Tensor<f32>> {
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(x.cast());
    let wv = tape.constant(w.cast());
    let bv = tape.constant(Tensor::from_vec(Shape::vector(b.len()), b.iter().map(|&v| v as f32).collect())?);
    let y = if spec.transposed {
        tape.transpose_conv2d(xv, wv, bv, spec)?
    } else {
        tape.conv2d(xv, wv, bv, spec)?
    };
    Ok(tape.value(y))
}

fn conv_case(rng: &mut ChaCha8Rng, transposed: bool) -> Result<f64> {
    let (spec, xs) = random_conv(rng, transposed);
    let x = random_tensor(rng, xs);
    let w = random_tensor(rng, spec.weight_shape());
    let b: Vec<f64> = (0..spec.out_channels).map(|_| grid_value(rng)).collect();
    let expected = if transposed {
        transpose_conv2d(&spec, &x, &w, &b)?
    } else {
        conv2d(&spec, &x, &w, &b)?
    };
    Ok(max_error(&run_conv(&spec, &x, &w, &b)?, &expected))
}

fn correlation_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = Shape::new(rng.gen_range(1..=2), rng.gen_range(1..=6), rng.gen_range(1..=6), rng.gen_range(2..=12));
    let max_disp = rng.gen_range(0..shape.w);
    let (l, r) = (random_tensor(rng, shape), random_tensor(rng, shape));
    let mut tape = Tape::<f32>::new();
    let lv = tape.constant(l.cast());
    let rv = tape.constant(r.cast());
    let y = tape.correlation_1d(lv, rv, &CorrSpec::new(max_disp))?;
    Ok(max_error(&tape.value(y), &correlation_1d(&l, &r, max_disp)))
}

fn warp_case(rng: &mut ChaCha8Rng) -> Result<f64> {
    let shape = Shape::new(rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=6), rng.gen_range(2..=12));
    let source = random_tensor(rng, shape);
    // Fractional disparities on the 32-bit grid, including out-of-row ones.
    let span = shape.w as f32;
    let disp = Tensor::from_fn(shape.with_c(1), |_, _, _, _| rng.gen_range(-2.0..span + 2.0) as f64);
    let mut tape = Tape::<f32>::new();
    let sv = tape.constant(source.cast());
    let dv = tape.constant(disp.cast());
    let y = tape.warp_horizontal(sv, dv)?;
    Ok(max_error(&tape.value(y), &warp_horizontal(&source, &disp)))
}

/// One random instance, returning its largest error.
type Case = fn(&mut ChaCha8Rng) -> Result<f64>;

/// Runs `instances` random cases per operator.
pub fn oracle_suite(seed: u64, instances: usize) -> Result<Vec<OracleResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let cases: [(&'static str, Case); 4] = [
        ("conv2d", |r| conv_case(r, false)),
        ("transpose_conv2d", |r| conv_case(r, true)),
        ("correlation_1d", correlation_case),
        ("warp_horizontal", warp_case),
    ];
    for (name, case) in cases {
        let mut worst = 0.0f64;
        for _ in 0..instances {
            worst = worst.max(case(&mut rng)?);
        }
        results.push(OracleResult {
            name,
            instances,
            max_error: worst,
        });
    }
    Ok(results)
}
