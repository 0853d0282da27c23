//! Run configuration files and the checkpointing training loop.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use msfnet_core::synth::{generate_random_dot, DatasetFilterRule, RandomDotSpec, StereoSample};
use msfnet_core::train::{MetricsReport, StepReport, TrainConfig, Trainer};

use crate::checkpoint;
use crate::dataset::load_dataset;
use crate::error::{IoError, Result};
use crate::metrics::MetricsWriter;

/// Training and validation samples.
pub type Split = (Vec<StereoSample<f32>>, Vec<StereoSample<f32>>);

/// Where training and validation samples come from.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Directory dataset; synthetic random-dot pairs when unset.
    pub dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    /// Apply the large-disparity rejection rule to directory datasets.
    pub filter: bool,
    pub samples: usize,
    pub val_samples: usize,
    pub max_disp: usize,
    pub shapes: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            val_dir: None,
            filter: true,
            samples: 8,
            val_samples: 8,
            max_disp: 24,
            shapes: 3,
            seed: 1000,
        }
    }
}

/// Offset between training and validation generator seeds.
pub const VALIDATION_SEED_OFFSET: u64 = 1 << 32;

impl DataConfig {
    pub fn spec(&self, train: &TrainConfig) -> RandomDotSpec {
        RandomDotSpec {
            height: train.height,
            width: train.width,
            max_disp: self.max_disp,
            shape_count: self.shapes,
        }
    }

    /// Training and validation sets.
    pub fn load(&self, train: &TrainConfig) -> Result<Split> {
        let rule = self.filter.then(DatasetFilterRule::default);
        let spec = self.spec(train);
        let train_set = match &self.dir {
            Some(dir) => load_dataset(dir, rule)?.0,
            None => synthetic_set(spec, self.seed, self.samples)?,
        };
        let val_set = match (&self.val_dir, &self.dir) {
            (Some(dir), _) => load_dataset(dir, rule)?.0,
            (None, Some(_)) => Vec::new(),
            (None, None) => synthetic_set(spec, self.seed.wrapping_add(VALIDATION_SEED_OFFSET), self.val_samples)?,
        };
        Ok((train_set, val_set))
    }
}

/// `count` random-dot samples with seeds `seed, seed + 1, …`.
pub fn synthetic_set(spec: RandomDotSpec, seed: u64, count: usize) -> Result<Vec<StereoSample<f32>>> {
    (0..count as u64)
        .map(|i| Ok(generate_random_dot(seed.wrapping_add(i), spec)?))
        .collect()
}

/// Everything a `train` invocation reads from its configuration file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Validation interval in iterations; 0 disables.
    pub eval_every: u64,
    /// Checkpoint interval in iterations; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval_every: 500,
            checkpoint_every: 500,
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| msfnet_core::Error::Config {
            layer: key.into(),
            detail: format!("cannot parse {value:?}"),
        })
        .map_err(Into::into)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.data;
        match key.trim() {
            "data_dir" => d.dir = Some(PathBuf::from(value.trim())),
            "val_dir" => d.val_dir = Some(PathBuf::from(value.trim())),
            "filter" => d.filter = parse(key, value)?,
            "samples" => d.samples = parse(key, value)?,
            "val_samples" => d.val_samples = parse(key, value)?,
            "data_max_disp" => d.max_disp = parse(key, value)?,
            "shapes" => d.shapes = parse(key, value)?,
            "data_seed" => d.seed = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            other => self.train.set(other, value)?,
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| msfnet_core::Error::Config {
                layer: "config".into(),
                detail: format!("line {}: expected key=value", i + 1),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
        let mut c = RunConfig::default();
        c.apply_text(&text).map_err(|e| IoError::format(path, e.to_string()))?;
        Ok(c)
    }
}

/// Output locations and intervals of a training loop.
#[derive(Debug, Clone, Default)]
pub struct SessionOptions {
    pub out_dir: Option<PathBuf>,
    pub eval_every: u64,
    pub checkpoint_every: u64,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const LATEST_CHECKPOINT: &str = "latest.msfn";

pub fn checkpoint_name(iteration: u64) -> String {
    format!("checkpoint_{iteration:06}.msfn")
}

/// Summary of [`run`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps: Vec<StepReport>,
    /// `(completed iterations, validation metrics)`.
    pub evaluations: Vec<(u64, MetricsReport)>,
    pub seconds_per_iteration: f64,
}

/// Steps `trainer` until it has completed `until` iterations, writing
/// metrics rows and checkpoints under `options.out_dir`. A trainer loaded
/// from a checkpoint continues its trajectory exactly and appends to the
/// existing metrics file.
pub fn run(
    trainer: &mut Trainer,
    train: &[StereoSample<f32>],
    val: &[StereoSample<f32>],
    until: u64,
    options: &SessionOptions,
    mut on_step: impl FnMut(&StepReport),
) -> Result<RunSummary> {
    let mut metrics = match &options.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
            Some(MetricsWriter::open(dir.join(METRICS_FILE), trainer.iteration > 0)?)
        }
        None => None,
    };
    let mut summary = RunSummary {
        steps: Vec::new(),
        evaluations: Vec::new(),
        seconds_per_iteration: 0.0,
    };
    let start = Instant::now();
    let first = trainer.iteration;
    while trainer.iteration < until {
        let report = trainer.step(train)?;
        if let Some(m) = metrics.as_mut() {
            m.row(&report)?;
        }
        on_step(&report);
        summary.steps.push(report);
        let done = trainer.iteration;
        let last = done == until;
        if !val.is_empty() && options.eval_every > 0 && (done.is_multiple_of(options.eval_every) || last) {
            summary.evaluations.push((done, trainer.evaluate(val)?));
        }
        if let Some(dir) = &options.out_dir {
            if options.checkpoint_every > 0 && done.is_multiple_of(options.checkpoint_every) {
                if let Some(m) = metrics.as_mut() {
                    m.flush()?;
                }
                checkpoint::save(trainer, dir.join(checkpoint_name(done)))?;
            }
            if last {
                checkpoint::save(trainer, dir.join(LATEST_CHECKPOINT))?;
            }
        }
    }
    if let Some(m) = metrics.as_mut() {
        m.flush()?;
    }
    let n = (trainer.iteration - first).max(1);
    summary.seconds_per_iteration = start.elapsed().as_secs_f64() / n as f64;
    Ok(summary)
}
