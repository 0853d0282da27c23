//! Random-dot stereo pairs with exact ground truth, cropping and the
//! large-disparity dataset filter.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::stereo::{DisparityMap, Mask};
use crate::tensor::{Scalar, Shape, Tensor};

/// A rectified pair with full-resolution ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoSample<T> {
    /// N×3×H×W in `[0, 1]`.
    pub left: Tensor<T>,
    pub right: Tensor<T>,
    pub disparity: DisparityMap<T>,
    pub valid: Mask,
    /// Left pixels with no visible counterpart in the right view. Only
    /// synthetic samples carry it.
    pub occluded: Option<Mask>,
}

impl<T: Scalar> StereoSample<T> {
    pub fn new(left: Tensor<T>, right: Tensor<T>, disparity: Tensor<T>, valid: Mask) -> Result<Self> {
        let (ls, ds) = (left.shape(), disparity.shape());
        if ls != right.shape() || ls.c != 3 || ds != ls.with_c(1) || valid.shape() != ds {
            return Err(Error::shape(
                "stereo_sample",
                alloc::format!("left {ls}, right {}, disparity {ds}, mask {}", right.shape(), valid.shape()),
            ));
        }
        Ok(StereoSample {
            left,
            right,
            disparity: DisparityMap::full(disparity)?,
            valid,
            occluded: None,
        })
    }

    pub fn height(&self) -> usize {
        self.left.shape().h
    }

    pub fn width(&self) -> usize {
        self.left.shape().w
    }

    /// Valid and not occluded.
    pub fn visible(&self) -> Mask {
        match &self.occluded {
            Some(o) => self.valid.and(&o.not()).expect("masks share a shape"),
            None => self.valid.clone(),
        }
    }

    /// Concatenates samples along the batch axis.
    pub fn stack(parts: &[&StereoSample<T>]) -> Result<Self> {
        let left: Vec<&Tensor<T>> = parts.iter().map(|s| &s.left).collect();
        let right: Vec<&Tensor<T>> = parts.iter().map(|s| &s.right).collect();
        let disp: Vec<&Tensor<T>> = parts.iter().map(|s| s.disparity.tensor()).collect();
        let valid: Vec<&Mask> = parts.iter().map(|s| &s.valid).collect();
        let mut out = StereoSample::new(
            Tensor::stack(&left)?,
            Tensor::stack(&right)?,
            Tensor::stack(&disp)?,
            Mask::stack(&valid)?,
        )?;
        if parts.iter().all(|s| s.occluded.is_some()) {
            let occ: Vec<&Mask> = parts.iter().map(|s| s.occluded.as_ref().expect("checked")).collect();
            out.occluded = Some(Mask::stack(&occ)?);
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> StereoSample<U> {
        StereoSample {
            left: self.left.cast(),
            right: self.right.cast(),
            disparity: DisparityMap::full(self.disparity.tensor().cast()).expect("scale 1"),
            valid: self.valid.clone(),
            occluded: self.occluded.clone(),
        }
    }
}

/// Parameters of [`generate_random_dot`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandomDotSpec {
    pub height: usize,
    pub width: usize,
    /// Largest disparity in pixels; must stay below `width / 4`.
    pub max_disp: usize,
    pub shape_count: usize,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    disp: usize,
}

impl Layer {
    fn covers(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

/// Builds a random-dot pair: a textured background plane at a base disparity
/// and `shape_count` textured rectangles at larger integer disparities.
///
/// The right view is rendered by forward-mapping every left pixel to
/// `x − d` with a z-buffer (larger disparity wins); right pixels no left
/// pixel reaches show the layered scene. Left pixels that map outside the
/// image or lose the z-test are marked occluded.
pub fn generate_random_dot(seed: u64, spec: RandomDotSpec) -> Result<StereoSample<f32>> {
    let RandomDotSpec {
        height: h,
        width: w,
        max_disp,
        shape_count,
    } = spec;
    if h == 0 || w == 0 {
        return Err(Error::Data(alloc::format!("empty image {h}x{w}")));
    }
    if 4 * max_disp >= w {
        return Err(Error::Data(alloc::format!("max disparity {max_disp} must stay below width/4 = {}", w / 4)));
    }
    let min_w = (w / 8).max(1);
    let max_w = (w / 3).max(min_w);
    let min_h = (h / 8).max(1);
    let max_h = (h / 2).max(min_h);
    if shape_count > 0 && (min_w > w || min_h > h) {
        return Err(Error::Data(alloc::format!("a shape of {min_w}x{min_h} does not fit {w}x{h}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = rng.gen_range(0..=max_disp / 2);
    let mut layers = vec![Layer {
        y0: 0,
        y1: h,
        x0: 0,
        x1: w,
        disp: base,
    }];
    for _ in 0..shape_count {
        let sw = rng.gen_range(min_w..=max_w);
        let sh = rng.gen_range(min_h..=max_h);
        let x0 = rng.gen_range(0..=w - sw);
        let y0 = rng.gen_range(0..=h - sh);
        let disp = if base < max_disp { rng.gen_range(base + 1..=max_disp) } else { base };
        layers.push(Layer {
            y0,
            y1: y0 + sh,
            x0,
            x1: x0 + sw,
            disp,
        });
    }
    // Nearer layers are drawn last so the topmost covering layer wins.
    layers[1..].sort_by_key(|l| l.disp);

    let canvas = w + max_disp;
    let textures: Vec<Vec<f32>> = layers
        .iter()
        .map(|_| (0..3 * h * canvas).map(|_| rng.gen::<f32>()).collect())
        .collect();
    let texel = |layer: usize, c: usize, y: usize, u: usize| textures[layer][(c * h + y) * canvas + u];

    let plane = h * w;
    let mut left = vec![0.0f32; 3 * plane];
    let mut right = vec![0.0f32; 3 * plane];
    let mut disp = vec![0.0f32; plane];
    let mut top = vec![0usize; plane];

    for y in 0..h {
        for x in 0..w {
            let li = (0..layers.len()).rev().find(|&i| layers[i].covers(y, x)).expect("background covers all");
            top[y * w + x] = li;
            disp[y * w + x] = layers[li].disp as f32;
            for c in 0..3 {
                left[c * plane + y * w + x] = texel(li, c, y, x);
            }
            // Layered scene as seen from the right camera.
            let ri = (0..layers.len())
                .rev()
                .find(|&i| layers[i].covers(y, x + layers[i].disp))
                .unwrap_or(0);
            let u = x + layers[ri].disp;
            for c in 0..3 {
                right[c * plane + y * w + x] = texel(ri, c, y, u);
            }
        }
    }

    // Forward z-buffer: the winner at each right pixel is the left pixel with
    // the largest disparity.
    let mut zbuf: Vec<Option<(usize, usize)>> = vec![None; plane];
    let mut occluded = vec![false; plane];
    for y in 0..h {
        for x in 0..w {
            let d = layers[top[y * w + x]].disp;
            if d > x {
                occluded[y * w + x] = true;
                continue;
            }
            let slot = &mut zbuf[y * w + x - d];
            match *slot {
                Some((_, best)) if best >= d => occluded[y * w + x] = true,
                Some((loser, _)) => {
                    occluded[y * w + loser] = true;
                    *slot = Some((x, d));
                }
                None => *slot = Some((x, d)),
            }
        }
    }
    for y in 0..h {
        for xr in 0..w {
            if let Some((x, _)) = zbuf[y * w + xr] {
                for c in 0..3 {
                    right[c * plane + y * w + xr] = left[c * plane + y * w + x];
                }
            }
        }
    }

    let s3 = Shape::new(1, 3, h, w);
    let s1 = Shape::new(1, 1, h, w);
    let mut sample = StereoSample::new(
        Tensor::from_vec(s3, left)?,
        Tensor::from_vec(s3, right)?,
        Tensor::from_vec(s1, disp)?,
        Mask::all(s1),
    )?;
    sample.occluded = Some(Mask::new(s1, occluded)?);
    Ok(sample)
}

/// Cuts the same `crop_h`×`crop_w` window from every field of a single-item
/// sample. Disparity values are unchanged.
pub fn random_crop<T: Scalar>(sample: &StereoSample<T>, crop_h: usize, crop_w: usize, seed: u64) -> Result<StereoSample<T>> {
    let (h, w) = (sample.height(), sample.width());
    if crop_h == 0 || crop_w == 0 || !crop_h.is_multiple_of(64) || !crop_w.is_multiple_of(64) {
        return Err(Error::Data(alloc::format!("crop {crop_h}x{crop_w} must be a nonzero multiple of 64")));
    }
    if crop_h > h || crop_w > w {
        return Err(Error::Data(alloc::format!("crop {crop_h}x{crop_w} exceeds image {h}x{w}")));
    }
    if sample.left.shape().n != 1 {
        return Err(Error::Data("random_crop expects a single sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y0 = rng.gen_range(0..=h - crop_h);
    let x0 = rng.gen_range(0..=w - crop_w);
    let cut = |t: &Tensor<T>| {
        let s = t.shape();
        Tensor::from_fn(Shape::new(1, s.c, crop_h, crop_w), |_, c, y, x| t.at(0, c, y0 + y, x0 + x))
    };
    let cut_mask = |m: &Mask| {
        let data = (0..crop_h)
            .flat_map(|y| (0..crop_w).map(move |x| (y, x)))
            .map(|(y, x)| m.get(0, y0 + y, x0 + x))
            .collect();
        Mask::new(Shape::new(1, 1, crop_h, crop_w), data)
    };
    Ok(StereoSample {
        left: cut(&sample.left),
        right: cut(&sample.right),
        disparity: DisparityMap::full(cut(sample.disparity.tensor()))?,
        valid: cut_mask(&sample.valid)?,
        occluded: sample.occluded.as_ref().map(cut_mask).transpose()?,
    })
}

/// Rejects samples where more than `fraction_threshold` of the valid pixels
/// exceed `disparity_threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetFilterRule {
    pub fraction_threshold: f64,
    pub disparity_threshold: f64,
}

impl Default for DatasetFilterRule {
    fn default() -> Self {
        DatasetFilterRule {
            fraction_threshold: 0.25,
            disparity_threshold: 300.0,
        }
    }
}

impl DatasetFilterRule {
    /// `true` when the sample is kept.
    pub fn keep<T: Scalar>(&self, disparity: &[T], valid: &Mask) -> Result<bool> {
        let total = valid.count();
        if total == 0 {
            return Err(Error::NoValidPixels { op: "dataset_filter" });
        }
        let large = disparity
            .iter()
            .zip(valid.data())
            .filter(|(d, &v)| v && d.as_f64() > self.disparity_threshold)
            .count();
        // Compare large/total > fraction without rounding the ratio.
        Ok((large as f64) <= self.fraction_threshold * total as f64)
    }
}
