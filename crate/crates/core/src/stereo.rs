//! Disparity maps, ground-truth resampling, losses and evaluation metrics.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Shape, Tensor};

/// Per-pixel boolean mask stored as N×1×H×W.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Shape,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Shape, data: Vec<bool>) -> Result<Self> {
        if shape.c != 1 || data.len() != shape.len() {
            return Err(Error::shape(
                "mask",
                alloc::format!("{} entries for mask shape {shape}", data.len()),
            ));
        }
        Ok(Mask { shape, data })
    }

    pub fn all(shape: Shape) -> Self {
        Mask {
            shape: shape.with_c(1),
            data: vec![true; shape.with_c(1).len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn get(&self, n: usize, y: usize, x: usize) -> bool {
        self.data[self.shape.index(n, 0, y, x)]
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.shape != other.shape {
            return Err(Error::shape("mask", alloc::format!("{} vs {}", self.shape, other.shape)));
        }
        Ok(Mask {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && b).collect(),
        })
    }

    pub fn not(&self) -> Mask {
        Mask {
            shape: self.shape,
            data: self.data.iter().map(|&v| !v).collect(),
        }
    }

    pub fn stack(parts: &[&Mask]) -> Result<Mask> {
        let first = parts.first().ok_or_else(|| Error::shape("mask", "no masks"))?.shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.shape.h != first.h || p.shape.w != first.w {
                return Err(Error::shape("mask", alloc::format!("{} vs {}", p.shape, first)));
            }
            data.extend_from_slice(&p.data);
            n += p.shape.n;
        }
        Ok(Mask {
            shape: Shape { n, ..first },
            data,
        })
    }

    pub fn item(&self, n: usize) -> Mask {
        let len = self.shape.item();
        Mask {
            shape: Shape { n: 1, ..self.shape },
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }
}

/// Single-channel disparity field at `1/scale` of full resolution. Values
/// are stored in the pixel units of that resolution, so upsampling by `scale`
/// and multiplying by `scale` recovers full-resolution disparity.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap<T> {
    tensor: Tensor<T>,
    scale: u32,
}

impl<T: Scalar> DisparityMap<T> {
    pub fn new(tensor: Tensor<T>, scale: u32) -> Result<Self> {
        if tensor.shape().c != 1 {
            return Err(Error::shape("disparity", alloc::format!("expected one channel, got {}", tensor.shape())));
        }
        if scale == 0 {
            return Err(Error::config("disparity", "scale must be positive"));
        }
        Ok(DisparityMap { tensor, scale })
    }

    pub fn full(tensor: Tensor<T>) -> Result<Self> {
        Self::new(tensor, 1)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn scale(&self) -> u32 {
        self.scale
    }

    pub fn shape(&self) -> Shape {
        self.tensor.shape()
    }

    pub fn data(&self) -> &[T] {
        self.tensor.data()
    }
}

/// Valid-aware block averaging of a full-resolution disparity map. Each
/// `factor×factor` block becomes the mean of its valid pixels divided by
/// `factor`; blocks without any valid pixel are marked invalid.
pub fn downsample_disparity<T: Scalar>(
    gt: &DisparityMap<T>,
    valid: &Mask,
    factor: usize,
) -> Result<(DisparityMap<T>, Mask)> {
    let s = gt.shape();
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::config("downsample_disparity", alloc::format!("factor {factor} is not a power of two")));
    }
    if !s.h.is_multiple_of(factor) || !s.w.is_multiple_of(factor) {
        return Err(Error::shape(
            "downsample_disparity",
            alloc::format!("{}x{} not divisible by {factor}", s.h, s.w),
        ));
    }
    if valid.shape() != s {
        return Err(Error::shape("downsample_disparity", alloc::format!("mask {} vs map {s}", valid.shape())));
    }
    if factor == 1 {
        return Ok((gt.clone(), valid.clone()));
    }
    let os = Shape::new(s.n, 1, s.h / factor, s.w / factor);
    let mut out = Vec::with_capacity(os.len());
    let mut mask = Vec::with_capacity(os.len());
    for n in 0..s.n {
        for by in 0..os.h {
            for bx in 0..os.w {
                let (mut sum, mut count) = (0.0f64, 0usize);
                for y in by * factor..(by + 1) * factor {
                    for x in bx * factor..(bx + 1) * factor {
                        if valid.get(n, y, x) {
                            sum += gt.tensor.at(n, 0, y, x).as_f64();
                            count += 1;
                        }
                    }
                }
                if count > 0 {
                    out.push(T::of(sum / count as f64 / factor as f64));
                    mask.push(true);
                } else {
                    out.push(T::zero());
                    mask.push(false);
                }
            }
        }
    }
    let scale = gt.scale * factor as u32;
    Ok((DisparityMap::new(Tensor::from_vec(os, out)?, scale)?, Mask::new(os, mask)?))
}

fn check_metric_inputs<T: Scalar>(op: &'static str, pred: &[T], gt: &[T], valid: &Mask) -> Result<usize> {
    if pred.len() != gt.len() || valid.data().len() != gt.len() {
        return Err(Error::shape(
            op,
            alloc::format!("{} predictions, {} targets, {} mask entries", pred.len(), gt.len(), valid.data().len()),
        ));
    }
    let count = valid.count();
    if count == 0 {
        return Err(Error::NoValidPixels { op });
    }
    Ok(count)
}

/// End-point error: mean `|P - G|` over valid pixels.
pub fn epe<T: Scalar>(pred: &[T], gt: &[T], valid: &Mask) -> Result<f64> {
    let count = check_metric_inputs("epe", pred, gt, valid)?;
    let total: f64 = pred
        .iter()
        .zip(gt)
        .zip(valid.data())
        .filter(|(_, &m)| m)
        .map(|((&p, &g), _)| (p.as_f64() - g.as_f64()).abs())
        .sum();
    Ok(total / count as f64)
}

/// Percentage of valid pixels whose absolute error is strictly above 3 px.
pub fn three_px_error<T: Scalar>(pred: &[T], gt: &[T], valid: &Mask) -> Result<f64> {
    let count = check_metric_inputs("three_px_error", pred, gt, valid)?;
    let bad = pred
        .iter()
        .zip(gt)
        .zip(valid.data())
        .filter(|((&p, &g), &m)| m && (p.as_f64() - g.as_f64()).abs() > 3.0)
        .count();
    Ok(100.0 * bad as f64 / count as f64)
}

/// Mean absolute error over valid pixels, recorded on the tape.
pub fn l1_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: &DisparityMap<T>, valid: &Mask) -> Result<Var> {
    if tape.shape(pred) != gt.shape() {
        return Err(Error::shape("l1_loss", alloc::format!("prediction {} vs target {}", tape.shape(pred), gt.shape())));
    }
    tape.masked_l1(pred, gt.data(), valid.data())
}

/// A prediction recorded on the tape together with its scale denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaledPrediction {
    pub var: Var,
    pub scale: u32,
}

#[derive(Debug, Clone)]
pub struct MultiscaleLoss<T> {
    pub total: Var,
    /// `(scale, unweighted l1)` per prediction, in input order.
    pub components: Vec<(u32, T)>,
}

/// `Σ_s weights[s] · l1_loss(pred_s, downsample(gt, s))`.
pub fn multiscale_loss<T: Scalar>(
    tape: &mut Tape<T>,
    preds: &[ScaledPrediction],
    gt_full: &DisparityMap<T>,
    valid: &Mask,
    weights: &[T],
) -> Result<MultiscaleLoss<T>> {
    if preds.len() != weights.len() {
        return Err(Error::config(
            "multiscale_loss",
            alloc::format!("{} predictions but {} weights", preds.len(), weights.len()),
        ));
    }
    let mut targets: Vec<(u32, DisparityMap<T>, Mask)> = Vec::new();
    let mut terms = Vec::with_capacity(preds.len());
    let mut components = Vec::with_capacity(preds.len());
    for (p, &w) in preds.iter().zip(weights) {
        if p.scale == 0 || !p.scale.is_power_of_two() || p.scale > 64 {
            return Err(Error::config(
                "multiscale_loss",
                alloc::format!("prediction scale 1/{} is not a power of two up to 64", p.scale),
            ));
        }
        if !targets.iter().any(|(s, ..)| *s == p.scale) {
            let (g, m) = downsample_disparity(gt_full, valid, p.scale as usize)?;
            targets.push((p.scale, g, m));
        }
        let (_, g, m) = targets.iter().find(|(s, ..)| *s == p.scale).expect("inserted above");
        let l = l1_loss(tape, p.var, g, m)?;
        components.push((p.scale, tape.scalar_value(l)));
        terms.push((l, w));
    }
    let total = tape.weighted_sum(&terms)?;
    Ok(MultiscaleLoss { total, components })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, v: &[f64]) -> DisparityMap<f64> {
        DisparityMap::full(Tensor::from_vec(Shape::new(1, 1, h, w), v.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn l1_loss_examples() {
        let g = map(2, 2, &[0.0; 4]);
        let valid = Mask::all(g.shape());
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_vec(g.shape(), vec![1.0, 4.0, 2.0, 0.0]).unwrap());
        let l = l1_loss(&mut tape, p, &g, &valid).unwrap();
        assert_eq!(tape.scalar_value(l), 1.75);

        let q = tape.constant(g.tensor().clone());
        let l0 = l1_loss(&mut tape, q, &g, &valid).unwrap();
        assert_eq!(tape.scalar_value(l0), 0.0);

        let off = tape.constant(g.tensor().map(|v| v + 1.0));
        let l1 = l1_loss(&mut tape, off, &g, &valid).unwrap();
        assert_eq!(tape.scalar_value(l1), 1.0);
    }

    #[test]
    fn l1_loss_without_valid_pixels() {
        let g = map(1, 2, &[0.0, 0.0]);
        let none = Mask::new(g.shape(), vec![false, false]).unwrap();
        let mut tape = Tape::new();
        let p = tape.constant(g.tensor().clone());
        assert!(matches!(l1_loss(&mut tape, p, &g, &none), Err(Error::NoValidPixels { .. })));
    }

    #[test]
    fn downsample_rules() {
        let g = map(2, 2, &[8.0; 4]);
        let valid = Mask::all(g.shape());
        let (same, _) = downsample_disparity(&g, &valid, 1).unwrap();
        assert_eq!(same, g);
        let (half, m) = downsample_disparity(&g, &valid, 2).unwrap();
        assert_eq!(half.data(), &[4.0]);
        assert_eq!(half.scale(), 2);
        assert_eq!(m.count(), 1);
        assert!(downsample_disparity(&map(3, 2, &[0.0; 6]), &Mask::all(Shape::new(1, 1, 3, 2)), 2).is_err());
    }

    #[test]
    fn downsample_ramp_by_hand() {
        // ramp v(y, x) = 4y + x on a 4x4 grid
        let vals: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let g = map(4, 4, &vals);
        let (d, _) = downsample_disparity(&g, &Mask::all(g.shape()), 2).unwrap();
        // block means: (0+1+4+5)/4 = 2.5, (2+3+6+7)/4 = 4.5, 10.5, 12.5; halved
        assert_eq!(d.data(), &[1.25, 2.25, 5.25, 6.25]);
    }

    #[test]
    fn downsample_ignores_invalid_and_marks_empty_blocks() {
        let g = map(2, 4, &[2.0, 100.0, 0.0, 0.0, 4.0, 6.0, 0.0, 0.0]);
        let valid = Mask::new(g.shape(), vec![true, false, false, false, true, true, false, false]).unwrap();
        let (d, m) = downsample_disparity(&g, &valid, 2).unwrap();
        assert_eq!(d.data()[0], 2.0);
        assert_eq!(m.data(), &[true, false]);
    }

    #[test]
    fn metric_examples() {
        let valid = Mask::all(Shape::new(1, 1, 1, 2));
        assert_eq!(epe(&[1.0, 3.0], &[0.0, 0.0], &valid).unwrap(), 2.0);
        assert_eq!(epe(&[5.0, 3.0], &[5.0, 3.0], &valid).unwrap(), 0.0);
        let v4 = Mask::all(Shape::new(1, 1, 1, 4));
        assert_eq!(three_px_error(&[0.0, 4.0, 2.0, 5.0], &[0.0; 4], &v4).unwrap(), 50.0);
        assert_eq!(three_px_error(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0], &v4).unwrap(), 0.0);
        assert_eq!(three_px_error(&[3.0], &[0.0], &Mask::all(Shape::scalar())).unwrap(), 0.0);
        let none = Mask::new(Shape::new(1, 1, 1, 2), vec![false, false]).unwrap();
        assert!(epe(&[1.0, 2.0], &[0.0, 0.0], &none).is_err());
        assert!(three_px_error(&[1.0, 2.0], &[0.0, 0.0], &none).is_err());
    }

    #[test]
    fn multiscale_weighted_sum_of_components() {
        let g = map(2, 2, &[0.0; 4]);
        let valid = Mask::all(g.shape());
        let mut tape = Tape::new();
        let p1 = tape.constant(Tensor::full(g.shape(), 1.0));
        let p2 = tape.constant(Tensor::full(Shape::new(1, 1, 1, 1), 3.0));
        let preds = [ScaledPrediction { var: p1, scale: 1 }, ScaledPrediction { var: p2, scale: 2 }];
        let loss = multiscale_loss(&mut tape, &preds, &g, &valid, &[0.5, 0.5]).unwrap();
        assert_eq!(tape.scalar_value(loss.total), 2.0);
        assert_eq!(loss.components, vec![(1, 1.0), (2, 3.0)]);
    }

    #[test]
    fn multiscale_rejects_bad_scale() {
        let g = map(2, 2, &[0.0; 4]);
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        for scale in [3, 128] {
            let preds = [ScaledPrediction { var: p, scale }];
            assert!(multiscale_loss(&mut tape, &preds, &g, &Mask::all(g.shape()), &[1.0]).is_err());
        }
    }
}
