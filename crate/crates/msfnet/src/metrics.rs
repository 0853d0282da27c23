//! Comma-separated training metrics: `iteration,loss,epe,d3px,lr`.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use msfnet_core::train::StepReport;

use crate::error::{IoError, Result};

pub const HEADER: [&str; 5] = ["iteration", "loss", "epe", "d3px", "lr"];

pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl MetricsWriter<File> {
    /// Creates `path`, or appends to it when `append` is set and it exists.
    pub fn open(path: impl AsRef<Path>, append: bool) -> Result<Self> {
        let path = path.as_ref();
        let existing = append && path.exists();
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)
            .map_err(|e| IoError::io(path, e))?;
        MetricsWriter::new(file, !existing)
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W, header: bool) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        if header {
            inner.write_record(HEADER)?;
        }
        Ok(MetricsWriter { inner })
    }

    pub fn row(&mut self, r: &StepReport) -> Result<()> {
        self.inner.write_record(row(r))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush().map_err(|e| IoError::io("metrics", e))
    }
}

/// Fields of one row; floats use the shortest exact representation.
pub fn row(r: &StepReport) -> [String; 5] {
    [
        r.iteration.to_string(),
        format!("{:?}", r.loss),
        format!("{:?}", r.epe),
        format!("{:?}", r.three_px),
        format!("{:?}", r.lr),
    ]
}
