//! Portable float maps, single channel only.
//!
//! Header: `Pf`, width and height, then a scale whose sign gives the byte
//! order (negative means little-endian). Rows are stored bottom to top.

use std::fs;
use std::path::Path;

use msfnet_core::{Shape, Tensor};

use crate::error::{IoError, Result};

/// Why a byte buffer is not a readable map.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PfmError {
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported channel layout {0:?}: only single-channel \"Pf\" maps are read")]
    UnsupportedChannels(String),
    #[error("scale must be nonzero")]
    ZeroScale,
    #[error("payload holds {got} bytes, expected {expected}")]
    Truncated { got: usize, expected: usize },
}

/// Parsed header fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfmHeader {
    pub width: usize,
    pub height: usize,
    pub little_endian: bool,
    /// Byte offset of the first sample.
    pub data_offset: usize,
}

pub fn parse_header(bytes: &[u8]) -> Result<PfmHeader, PfmError> {
    let mut pos = 0;
    let mut tokens: Vec<String> = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(PfmError::Header(format!("expected 4 header fields, found {}", tokens.len())));
        }
        let token = std::str::from_utf8(&bytes[start..pos]).map_err(|_| PfmError::Header("non-ASCII header".into()))?;
        tokens.push(token.to_string());
        if tokens.len() == 1 {
            match token {
                "Pf" => {}
                "PF" => return Err(PfmError::UnsupportedChannels(token.into())),
                other => return Err(PfmError::Header(format!("unknown magic {other:?}"))),
            }
        }
    }
    // Exactly one whitespace byte separates the scale from the samples.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(PfmError::Header("missing separator after scale".into()));
    }
    let dim = |t: &str, what: &str| -> Result<usize, PfmError> {
        match t.parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(PfmError::Header(format!("bad {what} {t:?}"))),
        }
    };
    let width = dim(&tokens[1], "width")?;
    let height = dim(&tokens[2], "height")?;
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| PfmError::Header(format!("bad scale {:?}", tokens[3])))?;
    if !scale.is_finite() {
        return Err(PfmError::Header(format!("bad scale {:?}", tokens[3])));
    }
    if scale == 0.0 {
        return Err(PfmError::ZeroScale);
    }
    Ok(PfmHeader {
        width,
        height,
        little_endian: scale < 0.0,
        data_offset: pos + 1,
    })
}

/// Decodes a map into a 1×1×H×W tensor with rows top to bottom.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>, PfmError> {
    let h = parse_header(bytes)?;
    let expected = h.width * h.height * 4;
    let payload = &bytes[h.data_offset..];
    if payload.len() < expected {
        return Err(PfmError::Truncated {
            got: payload.len(),
            expected,
        });
    }
    let mut data = vec![0.0f32; h.width * h.height];
    for (i, chunk) in payload[..expected].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if h.little_endian { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (file_row, x) = (i / h.width, i % h.width);
        data[(h.height - 1 - file_row) * h.width + x] = v;
    }
    Ok(Tensor::from_vec(Shape::new(1, 1, h.height, h.width), data).expect("length matches"))
}

/// Encodes a single-channel map little-endian with scale −1.
pub fn encode(map: &Tensor<f32>) -> Result<Vec<u8>, PfmError> {
    let s = map.shape();
    if s.n != 1 || s.c != 1 || s.h == 0 || s.w == 0 {
        return Err(PfmError::UnsupportedChannels(format!("tensor {s}")));
    }
    let mut out = format!("Pf\n{} {}\n-1.0\n", s.w, s.h).into_bytes();
    out.reserve(s.len() * 4);
    for y in (0..s.h).rev() {
        for &v in &map.data()[y * s.w..(y + 1) * s.w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn load_pfm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    decode(&bytes).map_err(|e| IoError::format(path, e.to_string()))
}

pub fn save_pfm(map: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(map).map_err(|e| IoError::format(path, e.to_string()))?;
    fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}
