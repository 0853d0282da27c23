//! Training checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MSFN" | u32 version | u32 len, config text | u64 iteration | u64 adam step
//! | u32 record count | records
//! record = u32 len, name | u32 n, c, h, w | n·c·h·w f32 values
//! ```
//!
//! Records hold every parameter under its own name followed by the Adam
//! moments as `adam.m/<name>` and `adam.v/<name>`. Batch order derives from
//! the configured seed and the iteration, so those two fields are the whole
//! generator state.

use std::fs;
use std::path::Path;

use msfnet_core::train::{TrainConfig, Trainer};
use msfnet_core::{Shape, Tensor};

use crate::error::{IoError, Result};

pub const MAGIC: &[u8; 4] = b"MSFN";
pub const VERSION: u32 = 1;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid UTF-8 string".to_string())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: Shape, values: &[f32]) {
    put_str(out, name);
    for d in [shape.n, shape.c, shape.h, shape.w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(trainer: &Trainer) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &trainer.config.to_text());
    out.extend_from_slice(&trainer.iteration.to_le_bytes());
    out.extend_from_slice(&trainer.adam.step.to_le_bytes());
    let count = trainer.params.len() * 3;
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, t) in trainer.params.iter() {
        put_record(&mut out, name, t.shape(), t.data());
    }
    for (prefix, moments) in [("adam.m", &trainer.adam.m), ("adam.v", &trainer.adam.v)] {
        for ((name, t), m) in trainer.params.iter().zip(moments) {
            put_record(&mut out, &format!("{prefix}/{name}"), t.shape(), m);
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Trainer, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("missing MSFN magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let config = TrainConfig::from_text(&r.string()?).map_err(|e| format!("config block: {e}"))?;
    let iteration = r.u64()?;
    let adam_step = r.u64()?;
    let count = r.u32()? as usize;
    let mut trainer = Trainer::new(config).map_err(|e| e.to_string())?;
    if count != trainer.params.len() * 3 {
        return Err(format!("{count} records, expected {}", trainer.params.len() * 3));
    }
    let ids: Vec<_> = trainer.params.ids().collect();
    for section in 0..3 {
        for (i, &id) in ids.iter().enumerate() {
            let name = r.string()?;
            let dims: Vec<usize> = (0..4).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<_, _>>()?;
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let base = trainer.params.name(id).to_string();
            let expected = match section {
                0 => base.clone(),
                1 => format!("adam.m/{base}"),
                _ => format!("adam.v/{base}"),
            };
            let expected_shape = trainer.params.get(id).shape();
            if name != expected || shape != expected_shape {
                return Err(format!("record {name} {shape} does not match {expected} {expected_shape}"));
            }
            let raw = r.take(shape.len() * 4)?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            match section {
                0 => trainer.params.set(id, Tensor::from_vec(shape, values).expect("sized")).map_err(|e| e.to_string())?,
                1 => trainer.adam.m[i] = values,
                _ => trainer.adam.v[i] = values,
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    trainer.iteration = iteration;
    trainer.adam.step = adam_step;
    Ok(trainer)
}

pub fn save(trainer: &Trainer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    // Write-then-rename so an interrupted save never leaves a partial file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(trainer)).map_err(|e| IoError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| IoError::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Trainer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    decode(&bytes).map_err(|e| IoError::format(path, e))
}
