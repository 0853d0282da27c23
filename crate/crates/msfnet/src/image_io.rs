//! 8-bit image reading and disparity visualisation.

use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use msfnet_core::{Shape, Tensor};

use crate::error::{IoError, Result};

/// Reads any PNG as a 1×3×H×W tensor in `[0, 1]`.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(IoError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "file not found")));
    }
    let img = image::open(path)
        .map_err(|source| IoError::Image {
            path: path.into(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

/// Writes item 0 of an N×3×H×W tensor in `[0, 1]` as an RGB PNG.
pub fn save_rgb(image: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let s = image.shape();
    if s.c != 3 {
        return Err(IoError::format(path, format!("expected 3 channels, got {s}")));
    }
    let img = RgbImage::from_fn(s.w as u32, s.h as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| {
            let v = image.at(0, c, y as usize, x as usize).clamp(0.0, 1.0);
            (v * 255.0).round() as u8
        }))
    });
    img.save(path).map_err(|source| IoError::Image {
        path: path.into(),
        source,
    })
}

/// `round(255 · clamp(d, 0, max) / max)` with halves rounded up.
pub fn quantize_disparity(d: f32, max_disp: f32) -> u8 {
    let v = if d.is_nan() { 0.0 } else { (d as f64).clamp(0.0, max_disp as f64) };
    (255.0 * v / max_disp as f64 + 0.5).floor() as u8
}

/// Renders item 0 of a disparity map as 8-bit grayscale: binary PGM when
/// the path ends in `.pgm`, PNG otherwise.
pub fn export_disparity_image(map: &Tensor<f32>, path: impl AsRef<Path>, max_disp: f32) -> Result<()> {
    let path = path.as_ref();
    if !(max_disp > 0.0 && max_disp.is_finite()) {
        return Err(IoError::format(path, format!("max disparity {max_disp} must be positive")));
    }
    let s = map.shape();
    if s.c != 1 {
        return Err(IoError::format(path, format!("expected a single-channel map, got {s}")));
    }
    let pixels: Vec<u8> = map.data()[..s.h * s.w].iter().map(|&d| quantize_disparity(d, max_disp)).collect();
    let is_pgm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        let mut bytes = format!("P5\n{} {}\n255\n", s.w, s.h).into_bytes();
        bytes.extend_from_slice(&pixels);
        fs::write(path, bytes).map_err(|e| IoError::io(path, e))
    } else {
        let img = GrayImage::from_raw(s.w as u32, s.h as u32, pixels).expect("buffer sized to the image");
        img.save(path).map_err(|source| IoError::Image {
            path: path.into(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rule() {
        assert_eq!(quantize_disparity(0.0, 64.0), 0);
        assert_eq!(quantize_disparity(-3.0, 64.0), 0);
        assert_eq!(quantize_disparity(64.0, 64.0), 255);
        assert_eq!(quantize_disparity(100.0, 64.0), 255);
        // 127.5 rounds up.
        assert_eq!(quantize_disparity(32.0, 64.0), 128);
    }
}
