//! Paired seeded training runs for the ablation comparisons.
//!
//! Every arm of a comparison trains the desk network on the same random-dot
//! data with the same initialization and batch order; only the overridden
//! keys differ. Validation pairs come from a disjoint generator range.

use msfnet_core::train::{MetricsReport, Trainer};

use crate::error::Result;
use crate::session::{self, RunConfig, SessionOptions};

/// Budget of one arm. Fixed before any comparison was run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Protocol {
    pub iterations: u64,
    pub train_samples: usize,
    pub val_samples: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            iterations: 2000,
            train_samples: 64,
            val_samples: 32,
        }
    }
}

/// Run configuration of one arm: seed `seed` drives initialization, batch
/// order and the generated data.
pub fn arm_config(seed: u64, overrides: &[(&str, &str)], protocol: Protocol) -> Result<RunConfig> {
    let mut run = RunConfig::default();
    run.train.seed = seed;
    run.train.iterations = protocol.iterations;
    run.data.seed = seed << 20;
    run.data.samples = protocol.train_samples;
    run.data.val_samples = protocol.val_samples;
    for (k, v) in overrides {
        run.set(k, v)?;
    }
    Ok(run)
}

/// Trains one arm in memory and returns its validation metrics.
pub fn validation_metrics(seed: u64, overrides: &[(&str, &str)], protocol: Protocol) -> Result<MetricsReport> {
    let run = arm_config(seed, overrides, protocol)?;
    let (train_set, val_set) = run.data.load(&run.train)?;
    let mut trainer = Trainer::new(run.train.clone())?;
    let options = SessionOptions {
        out_dir: None,
        eval_every: 0,
        checkpoint_every: 0,
    };
    session::run(&mut trainer, &train_set, &val_set, protocol.iterations, &options, |_| {})?;
    Ok(trainer.evaluate(&val_set)?)
}
