//! Central finite-difference checks of every differentiable operation in
//! 64-bit precision.
//!
//! Each case draws random inputs, resampling until they sit away from the
//! operation's kinks (ReLU and |·| at zero, integer sampling positions and
//! the clamp borders of the warp), reduces the output to a scalar with a
//! fixed random projection and compares tape gradients against
//! `(f(x + h) − f(x − h)) / 2h`.

use alloc::boxed::Box;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::ConvSpec;
use crate::correlation::CorrSpec;
use crate::error::{Error, Result};
use crate::params::{Forward, Mode, ParamStore};
use crate::sgrm::compute_guidance;
use crate::stereo::{multiscale_loss, DisparityMap, Mask, ScaledPrediction};
use crate::tape::Var;
use crate::tensor::{Shape, Tensor};

pub const STEP: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const FLOOR: f64 = 1e-4;

type Build = dyn Fn(&mut Forward<'_, f64>, &[Var]) -> Result<Var>;
type Accept = dyn Fn(&[Tensor<f64>]) -> bool;

/// One checkable operation: input shapes with their sampling ranges, the
/// graph builder and the kink-avoidance predicate.
pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<(Shape, f64, f64)>,
    pub build: Box<Build>,
    pub accept: Box<Accept>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckResult {
    pub name: &'static str,
    /// Largest `|a − n| / max(|a|, |n|, FLOOR)` over all input coordinates.
    pub max_rel_error: f64,
    pub coordinates: usize,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

fn evaluate(case: &Case, inputs: &[Tensor<f64>], projection: &mut Option<Tensor<f64>>, grads: bool) -> Result<(f64, Vec<Tensor<f64>>)> {
    let store = ParamStore::new();
    let mut fwd = Forward::new(&store, Mode::Train);
    let vars: Vec<Var> = inputs.iter().map(|t| fwd.tape.leaf(t.clone(), true)).collect();
    let y = (case.build)(&mut fwd, &vars)?;
    let ys = fwd.tape.shape(y);
    let loss = if ys.len() == 1 {
        y
    } else {
        let r = projection.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(ys.len() as u64);
            random_tensor(&mut rng, ys, -1.0, 1.0)
        });
        let r = fwd.tape.constant(r.clone());
        let p = fwd.tape.mul(y, r)?;
        fwd.tape.sum(p)?
    };
    let value = fwd.tape.scalar_value(loss);
    if !grads {
        return Ok((value, Vec::new()));
    }
    fwd.tape.backward(loss)?;
    let g = vars
        .iter()
        .map(|&v| fwd.tape.grad_tensor(v).unwrap_or_else(|| Tensor::zeros(fwd.tape.shape(v))))
        .collect();
    Ok((value, g))
}

/// Runs one case with inputs drawn from `seed`.
pub fn check(case: &Case, seed: u64) -> Result<GradCheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::new();
    for attempt in 0.. {
        if attempt == 1000 {
            return Err(Error::Data(alloc::format!("{}: no kink-free sample in 1000 draws", case.name)));
        }
        inputs = case.inputs.iter().map(|&(s, lo, hi)| random_tensor(&mut rng, s, lo, hi)).collect();
        if (case.accept)(&inputs) {
            break;
        }
    }
    let mut projection = None;
    let (_, analytic) = evaluate(case, &inputs, &mut projection, true)?;
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for i in 0..inputs.len() {
        for k in 0..inputs[i].data().len() {
            let orig = inputs[i].data()[k];
            inputs[i].data_mut()[k] = orig + STEP;
            let (plus, _) = evaluate(case, &inputs, &mut projection, false)?;
            inputs[i].data_mut()[k] = orig - STEP;
            let (minus, _) = evaluate(case, &inputs, &mut projection, false)?;
            inputs[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic[i].data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(rel);
            coordinates += 1;
        }
    }
    Ok(GradCheckResult {
        name: case.name,
        max_rel_error: worst,
        coordinates,
    })
}

fn away_from_zero(t: &Tensor<f64>, margin: f64) -> bool {
    t.data().iter().all(|v| v.abs() > margin)
}

/// Sampling position `x − d` stays off integers and off the clamp borders.
fn warp_smooth(disparity: &Tensor<f64>, margin: f64) -> bool {
    let s = disparity.shape();
    let last = (s.w - 1) as f64;
    (0..s.n).all(|n| {
        (0..s.h).all(|y| {
            (0..s.w).all(|x| {
                let u = x as f64 - disparity.at(n, 0, y, x);
                let frac = u - num_traits::Float::floor(u);
                let inside = u > margin && u < last - margin;
                let outside = u < -margin || u > last + margin;
                (inside && frac > margin && frac < 1.0 - margin) || outside
            })
        })
    })
}

fn guidance_values(inputs: &[Tensor<f64>]) -> Option<Tensor<f64>> {
    let store = ParamStore::new();
    let mut fwd = Forward::new(&store, Mode::Infer);
    let d = fwd.tape.constant(inputs[0].clone());
    let l = fwd.tape.constant(inputs[1].clone());
    let r = fwd.tape.constant(inputs[2].clone());
    let warped = fwd.tape.warp_horizontal(r, d).ok()?;
    let diff = fwd.tape.sub(l, warped).ok()?;
    Some(fwd.tape.value(diff))
}

fn s(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w)
}

fn conv_case(name: &'static str, x: Shape, spec: ConvSpec) -> Case {
    Case {
        name,
        inputs: alloc::vec![(x, -1.0, 1.0), (spec.weight_shape(), -1.0, 1.0), (Shape::vector(spec.out_channels), -1.0, 1.0)],
        build: Box::new(move |f, v| {
            if spec.transposed {
                f.tape.transpose_conv2d(v[0], v[1], v[2], &spec)
            } else {
                f.tape.conv2d(v[0], v[1], v[2], &spec)
            }
        }),
        accept: Box::new(|_| true),
    }
}

/// Every differentiable operation, on tensors no larger than 2×4×8×8.
pub fn cases() -> Vec<Case> {
    let mut out = alloc::vec![
        conv_case("conv2d", s(2, 3, 7, 7), ConvSpec::conv(3, 2, 1, 3, 4)),
        conv_case("conv2d_wide", s(1, 2, 6, 6), ConvSpec::conv(3, 1, 1, 2, 6)),
        conv_case("conv2d_pointwise", s(2, 4, 5, 5), ConvSpec::conv(1, 1, 0, 4, 3)),
        conv_case("conv2d_pointwise_wide", s(1, 3, 4, 4), ConvSpec::conv(1, 1, 0, 3, 5)),
        conv_case("transpose_conv2d", s(2, 3, 4, 4), ConvSpec::deconv(4, 2, 1, 3, 2)),
        conv_case("transpose_conv2d_k8s4", s(1, 2, 2, 2), ConvSpec::deconv(8, 4, 2, 2, 2)),
    ];
    out.push(Case {
        name: "relu",
        inputs: alloc::vec![(s(2, 3, 4, 4), -1.0, 1.0)],
        build: Box::new(|f, v| f.tape.relu(v[0])),
        accept: Box::new(|t| away_from_zero(&t[0], 1e-2)),
    });
    let pair = alloc::vec![(s(2, 2, 3, 3), -1.0, 1.0), (s(2, 2, 3, 3), -1.0, 1.0)];
    out.push(Case {
        name: "add",
        inputs: pair.clone(),
        build: Box::new(|f, v| f.tape.add(v[0], v[1])),
        accept: Box::new(|_| true),
    });
    out.push(Case {
        name: "sub",
        inputs: pair.clone(),
        build: Box::new(|f, v| f.tape.sub(v[0], v[1])),
        accept: Box::new(|_| true),
    });
    out.push(Case {
        name: "mul",
        inputs: pair.clone(),
        build: Box::new(|f, v| f.tape.mul(v[0], v[1])),
        accept: Box::new(|_| true),
    });
    out.push(Case {
        name: "scale",
        inputs: alloc::vec![(s(1, 2, 3, 3), -1.0, 1.0)],
        build: Box::new(|f, v| f.tape.scale(v[0], -2.5)),
        accept: Box::new(|_| true),
    });
    out.push(Case {
        name: "error_map",
        inputs: pair,
        build: Box::new(|f, v| f.tape.abs_diff(v[0], v[1])),
        accept: Box::new(|t| t[0].data().iter().zip(t[1].data()).all(|(a, b)| (a - b).abs() > 1e-2)),
    });
    out.push(Case {
        name: "sum",
        inputs: alloc::vec![(s(2, 3, 2, 4), -1.0, 1.0)],
        build: Box::new(|f, v| f.tape.sum(v[0])),
        accept: Box::new(|_| true),
    });
    out.push(Case {
        name: "concat_channels",
        inputs: alloc::vec![(s(2, 1, 3, 4), -1.0, 1.0), (s(2, 3, 3, 4), -1.0, 1.0), (s(2, 2, 3, 4), -1.0, 1.0)],
        build: Box::new(|f, v| f.tape.concat_channels(v)),
        accept: Box::new(|_| true),
    });
    out.push(Case {
        name: "upsample_nearest",
        inputs: alloc::vec![(s(2, 2, 2, 3), -1.0, 1.0)],
        build: Box::new(|f, v| f.tape.upsample_nearest(v[0], 2)),
        accept: Box::new(|_| true),
    });
    out.push(Case {
        name: "correlation_1d",
        inputs: alloc::vec![(s(2, 3, 4, 8), -1.0, 1.0), (s(2, 3, 4, 8), -1.0, 1.0)],
        build: Box::new(|f, v| f.tape.correlation_1d(v[0], v[1], &CorrSpec::new(3))),
        accept: Box::new(|_| true),
    });
    out.push(Case {
        name: "warp_horizontal",
        inputs: alloc::vec![(s(2, 2, 3, 8), -1.0, 1.0), (s(2, 1, 3, 8), -1.5, 9.5)],
        build: Box::new(|f, v| f.tape.warp_horizontal(v[0], v[1])),
        accept: Box::new(|t| warp_smooth(&t[1], 2e-2)),
    });
    out.push(Case {
        name: "compute_guidance",
        inputs: alloc::vec![(s(2, 1, 3, 8), -1.5, 9.5), (s(2, 4, 3, 8), -1.0, 1.0), (s(2, 4, 3, 8), -1.0, 1.0)],
        build: Box::new(|f, v| compute_guidance(f, v[0], v[1], v[2], "")),
        accept: Box::new(|t| warp_smooth(&t[0], 2e-2) && guidance_values(t).is_some_and(|g| away_from_zero(&g, 1e-2))),
    });
    out.push(Case {
        name: "l1_loss",
        inputs: alloc::vec![(s(2, 1, 4, 4), -3.0, 3.0)],
        build: Box::new(|f, v| {
            let target: Vec<f64> = (0..32).map(|i| (i % 7) as f64 * 0.37).collect();
            let mask: Vec<bool> = (0..32).map(|i| i % 5 != 0).collect();
            f.tape.masked_l1(v[0], &target, &mask)
        }),
        accept: Box::new(|t| t[0].data().iter().enumerate().all(|(i, p)| (p - (i % 7) as f64 * 0.37).abs() > 1e-2)),
    });
    out.push(Case {
        name: "weighted_sum",
        inputs: alloc::vec![(Shape::scalar(), -1.0, 1.0), (Shape::scalar(), -1.0, 1.0)],
        build: Box::new(|f, v| f.tape.weighted_sum(&[(v[0], 0.25), (v[1], -1.5)])),
        accept: Box::new(|_| true),
    });
    out.push(Case {
        name: "multiscale_loss",
        inputs: alloc::vec![(s(1, 1, 8, 8), 0.0, 6.0), (s(1, 1, 4, 4), 0.0, 3.0), (s(1, 1, 2, 2), 0.0, 1.5)],
        build: Box::new(|f, v| {
            let gt = multiscale_target();
            let valid = Mask::all(gt.shape());
            let preds = [
                ScaledPrediction { var: v[0], scale: 1 },
                ScaledPrediction { var: v[1], scale: 2 },
                ScaledPrediction { var: v[2], scale: 4 },
            ];
            Ok(multiscale_loss(&mut f.tape, &preds, &gt, &valid, &[0.5, 0.3, 0.2])?.total)
        }),
        accept: Box::new(|t| {
            let gt = multiscale_target();
            let valid = Mask::all(gt.shape());
            [1usize, 2, 4].iter().zip(t).all(|(&f, p)| {
                let (g, _) = crate::stereo::downsample_disparity(&gt, &valid, f).expect("divisible");
                p.data().iter().zip(g.data()).all(|(a, b)| (a - b).abs() > 1e-2)
            })
        }),
    });
    out
}

fn multiscale_target() -> DisparityMap<f64> {
    let t = Tensor::from_fn(Shape::new(1, 1, 8, 8), |_, _, y, x| ((y * 8 + x) % 11) as f64 * 0.5);
    DisparityMap::full(t).expect("scale 1")
}

/// Runs every case.
pub fn suite(seed: u64) -> Result<Vec<GradCheckResult>> {
    cases().iter().enumerate().map(|(i, c)| check(c, seed.wrapping_add(i as u64))).collect()
}

