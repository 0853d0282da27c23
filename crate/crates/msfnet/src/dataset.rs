//! Directory datasets: `left/NNNN.png`, `right/NNNN.png`, `disp/NNNN.pfm`.

use std::fs;
use std::path::{Path, PathBuf};

use msfnet_core::synth::{DatasetFilterRule, StereoSample};
use msfnet_core::Mask;

use crate::error::{IoError, Result};
use crate::image_io::{load_rgb, save_rgb};
use crate::pfm::{load_pfm, save_pfm};

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| IoError::io(path, e))
}

/// Writes samples as `NNNN` triples. Images are quantised to 8 bits.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[StereoSample<f32>]) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["left", "right", "disp"] {
        create_dir(&dir.join(sub))?;
    }
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("{i:04}");
        save_rgb(&s.left, dir.join("left").join(format!("{stem}.png")))?;
        save_rgb(&s.right, dir.join("right").join(format!("{stem}.png")))?;
        save_pfm(&s.disparity.tensor().item(0), dir.join("disp").join(format!("{stem}.pfm")))?;
    }
    Ok(())
}

/// Stems present under `left/`, sorted.
pub fn list_stems(dir: impl AsRef<Path>) -> Result<Vec<String>> {
    let left = dir.as_ref().join("left");
    let entries = fs::read_dir(&left).map_err(|e| IoError::io(&left, e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| IoError::io(&left, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn paths(dir: &Path, stem: &str) -> [PathBuf; 3] {
    [
        dir.join("left").join(format!("{stem}.png")),
        dir.join("right").join(format!("{stem}.png")),
        dir.join("disp").join(format!("{stem}.pfm")),
    ]
}

/// Loads one triple. Pixels with non-finite or negative disparity are
/// marked invalid.
pub fn load_sample(dir: impl AsRef<Path>, stem: &str) -> Result<StereoSample<f32>> {
    let [l, r, d] = paths(dir.as_ref(), stem);
    let left = load_rgb(&l)?;
    let right = load_rgb(&r)?;
    let disp = load_pfm(&d)?;
    let valid = Mask::new(disp.shape(), disp.data().iter().map(|v| v.is_finite() && *v >= 0.0).collect())?;
    let disp = disp.map(|v| if v.is_finite() && v >= 0.0 { v } else { 0.0 });
    if left.shape() != right.shape() || disp.shape() != left.shape().with_c(1) {
        return Err(IoError::format(
            d,
            format!("image {} / {} and disparity {} differ", left.shape(), right.shape(), disp.shape()),
        ));
    }
    Ok(StereoSample::new(left, right, disp, valid)?)
}

/// Loads every triple, dropping samples the filter rejects. Returns the
/// kept samples and the number rejected.
pub fn load_dataset(dir: impl AsRef<Path>, filter: Option<DatasetFilterRule>) -> Result<(Vec<StereoSample<f32>>, usize)> {
    let dir = dir.as_ref();
    let mut kept = Vec::new();
    let mut rejected = 0;
    for stem in list_stems(dir)? {
        let s = load_sample(dir, &stem)?;
        if let Some(rule) = filter {
            if !rule.keep(s.disparity.data(), &s.valid)? {
                rejected += 1;
                continue;
            }
        }
        kept.push(s);
    }
    if kept.is_empty() && rejected == 0 {
        return Err(IoError::format(dir, "no samples found under left/"));
    }
    Ok((kept, rejected))
}
