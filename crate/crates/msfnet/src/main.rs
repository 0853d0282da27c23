use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use msfnet::session::{self, RunConfig, SessionOptions};
use msfnet::{checkpoint, dataset, image_io, pfm};
use msfnet_core::gradcheck;
use msfnet_core::graph::wiring_dump;
use msfnet_core::synth::RandomDotSpec;
use msfnet_core::train::{self, TrainConfig};

/// Stereo disparity network: training, evaluation and inference.
#[derive(Parser)]
#[command(name = "msfnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Settings {
    /// Plain-text key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides one configuration key (repeatable), e.g. --set stack_count=2.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Settings {
    fn apply(&self, run: &mut RunConfig) -> Result<()> {
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
            run.apply_text(&text).with_context(|| format!("{}", path.display()))?;
        }
        for kv in &self.overrides {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set {kv:?}: expected KEY=VALUE");
            };
            run.set(k, v).with_context(|| format!("--set {kv}"))?;
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Trains a network, writing metrics.csv and checkpoints to --out.
    Train {
        #[command(flatten)]
        settings: Settings,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continues from a checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Suppresses per-evaluation progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Reports EPE and 3-pixel error of a checkpoint.
    Eval {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to the synthetic validation set.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Predicts the disparity of one rectified pair.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        /// Output disparity map in PFM format.
        #[arg(long)]
        pfm: PathBuf,
        /// Optional 8-bit visualization (PNG, or PGM by extension).
        #[arg(long)]
        image: Option<PathBuf>,
        /// Disparity mapped to white; defaults to the prediction maximum.
        #[arg(long)]
        max_disp: Option<f32>,
    },
    /// Runs the finite-difference gradient suite in 64-bit precision.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Writes the layer wiring table (defaults: m = 1 at 384x768).
    Dumpgraph {
        #[command(flatten)]
        settings: Settings,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes a random-dot dataset (left/right PNG plus PFM disparity).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 128)]
        width: usize,
        #[arg(long, default_value_t = 24)]
        max_disp: usize,
        #[arg(long, default_value_t = 3)]
        shapes: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", diagnostic(&e));
            ExitCode::FAILURE
        }
    }
}

/// One line joining the error chain; causes already quoted by an outer
/// message are skipped.
fn diagnostic(e: &anyhow::Error) -> String {
    let mut line = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if line.contains(&text) {
            continue;
        }
        if !line.is_empty() {
            line.push_str(": ");
        }
        line.push_str(&text);
    }
    line.replace('\n', " ")
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train { settings, out, resume, quiet } => cmd_train(&settings, &out, resume.as_deref(), quiet),
        Command::Eval { settings, checkpoint, data } => cmd_eval(&settings, &checkpoint, data),
        Command::Infer { checkpoint, left, right, pfm, image, max_disp } => {
            cmd_infer(&checkpoint, &left, &right, &pfm, image.as_deref(), max_disp)
        }
        Command::Gradcheck { seed, tolerance } => cmd_gradcheck(seed, tolerance),
        Command::Dumpgraph { settings, out } => cmd_dumpgraph(&settings, out.as_deref()),
        Command::GenData { out, count, seed, height, width, max_disp, shapes } => {
            let spec = RandomDotSpec { height, width, max_disp, shape_count: shapes };
            let samples = session::synthetic_set(spec, seed, count)?;
            dataset::write_dataset(&out, &samples)?;
            println!("wrote {count} samples to {}", out.display());
            Ok(())
        }
    }
}

fn cmd_train(settings: &Settings, out: &Path, resume: Option<&Path>, quiet: bool) -> Result<()> {
    let mut run = RunConfig::default();
    let mut trainer = match resume {
        Some(path) => {
            let trainer = checkpoint::load(path)?;
            run.train = trainer.config.clone();
            settings.apply(&mut run)?;
            if run.train.net != trainer.config.net || (run.train.height, run.train.width) != (trainer.config.height, trainer.config.width) {
                bail!("{}: network settings cannot change on resume", path.display());
            }
            let mut trainer = trainer;
            trainer.config.iterations = run.train.iterations;
            trainer
        }
        None => {
            settings.apply(&mut run)?;
            train::Trainer::new(run.train.clone())?
        }
    };
    let (train_set, val_set) = run.data.load(&run.train)?;
    let options = SessionOptions {
        out_dir: Some(out.to_path_buf()),
        eval_every: run.eval_every,
        checkpoint_every: run.checkpoint_every,
    };
    let until = trainer.config.iterations;
    let eval_every = run.eval_every.max(1);
    let summary = session::run(&mut trainer, &train_set, &val_set, until, &options, |r| {
        if !quiet && (r.iteration + 1) % eval_every == 0 {
            println!("iteration {} loss {:.4} epe {:.3} d3px {:.2}% lr {:e}", r.iteration + 1, r.loss, r.epe, r.three_px, r.lr);
        }
    })?;
    for (it, m) in &summary.evaluations {
        println!("validation at {it}: epe {:.4} d3px {:.2}%", m.epe, m.three_px);
    }
    println!("{:.1} ms per iteration; checkpoint {}", summary.seconds_per_iteration * 1e3, out.join(session::LATEST_CHECKPOINT).display());
    Ok(())
}

fn cmd_eval(settings: &Settings, path: &Path, data: Option<PathBuf>) -> Result<()> {
    let trainer = checkpoint::load(path)?;
    let mut run = RunConfig { train: trainer.config.clone(), ..RunConfig::default() };
    settings.apply(&mut run)?;
    let samples = match data {
        Some(dir) => {
            let rule = run.data.filter.then(Default::default);
            dataset::load_dataset(&dir, rule)?.0
        }
        None => run.data.load(&run.train)?.1,
    };
    if samples.is_empty() {
        bail!("no evaluation samples");
    }
    let report = trainer.evaluate(&samples)?;
    println!("samples {} epe {:.4} d3px {:.2}%", samples.len(), report.epe, report.three_px);
    Ok(())
}

fn cmd_infer(ckpt: &Path, left: &Path, right: &Path, out: &Path, image: Option<&Path>, max_disp: Option<f32>) -> Result<()> {
    let left = image_io::load_rgb(left)?;
    let right = image_io::load_rgb(right)?;
    let trainer = checkpoint::load(ckpt)?;
    let disparity = trainer.predict(&left, &right)?;
    pfm::save_pfm(&disparity, out)?;
    if let Some(path) = image {
        let top = max_disp.unwrap_or_else(|| disparity.data().iter().copied().fold(0.0, f32::max));
        image_io::export_disparity_image(&disparity, path, top.max(f32::EPSILON))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_gradcheck(seed: u64, tolerance: f64) -> Result<()> {
    let results = gradcheck::suite(seed)?;
    println!("{:<24} {:>12} {:>8}", "op", "max_rel_err", "coords");
    let mut failed = Vec::new();
    for r in &results {
        println!("{:<24} {:>12.3e} {:>8}", r.name, r.max_rel_error, r.coordinates);
        // Written so that a NaN error fails.
        if r.max_rel_error.partial_cmp(&tolerance) != Some(std::cmp::Ordering::Less) {
            failed.push(r.name);
        }
    }
    if !failed.is_empty() {
        bail!("gradient check above {tolerance:e}: {}", failed.join(", "));
    }
    Ok(())
}

fn cmd_dumpgraph(settings: &Settings, out: Option<&Path>) -> Result<()> {
    let mut run = RunConfig { train: TrainConfig::full_width(), ..RunConfig::default() };
    settings.apply(&mut run)?;
    let text = wiring_dump(&run.train.net, run.train.height, run.train.width)?;
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("{}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}
