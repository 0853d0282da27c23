//! Training configuration, the optimisation loop and evaluation.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::NetConfig;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::optim::{Adam, LrSchedule};
use crate::params::{Forward, Mode, ParamStore};
use crate::stereo::{epe, multiscale_loss, three_px_error};
use crate::synth::StereoSample;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub height: usize,
    pub width: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// One weight per supervised output; `None` means equal weights.
    pub loss_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        TrainConfig {
            net: NetConfig::desk(),
            height: 64,
            width: 128,
            lr: 2e-3,
            schedule: LrSchedule::At(alloc::vec![1000, 1500, 1800]),
            iterations: 2000,
            batch_size: 2,
            seed: 0,
            loss_weights: None,
        }
    }
}

fn parse<V: core::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(key, alloc::format!("cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "on" | "yes" => Ok(true),
        "false" | "0" | "off" | "no" => Ok(false),
        _ => Err(Error::config(key, alloc::format!("expected a boolean, got {value:?}"))),
    }
}

impl TrainConfig {
    /// Full-width settings: 384×768 crops, λ = 1e-4 halved
    /// every 100k iterations.
    pub fn full_width() -> Self {
        TrainConfig {
            net: NetConfig::default(),
            height: 384,
            width: 768,
            lr: 1e-4,
            schedule: LrSchedule::Every(100_000),
            iterations: 600_000,
            batch_size: 2,
            seed: 0,
            loss_weights: None,
        }
    }

    pub const KEYS: &'static [&'static str] = &[
        "width_multiplier",
        "max_disp",
        "fine_disp",
        "stack_count",
        "guidance",
        "share_stacks",
        "coarsest_prediction",
        "local_prior_in_cost",
        "local_details_in_guidance",
        "local_prior_in_sgrm",
        "relu_on_reducers",
        "height",
        "width",
        "lr",
        "lr_schedule",
        "iterations",
        "batch_size",
        "seed",
        "loss_weights",
    ];

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let n = &mut self.net;
        match key.trim() {
            "width_multiplier" => n.width = parse(key, value)?,
            "max_disp" => n.max_disp = parse(key, value)?,
            "fine_disp" => n.fine_disp = parse(key, value)?,
            "stack_count" => n.stack_count = parse(key, value)?,
            "guidance" => n.guidance = parse_bool(key, value)?,
            "share_stacks" => n.share_stacks = parse_bool(key, value)?,
            "coarsest_prediction" => n.coarsest_prediction = parse_bool(key, value)?,
            "local_prior_in_cost" => n.routing.local_prior_in_cost = parse_bool(key, value)?,
            "local_details_in_guidance" => n.routing.local_details_in_guidance = parse_bool(key, value)?,
            "local_prior_in_sgrm" => n.routing.local_prior_in_sgrm = parse_bool(key, value)?,
            "relu_on_reducers" => n.relu_on_reducers = parse_bool(key, value)?,
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lr_schedule" => self.schedule = parse_schedule(value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "loss_weights" => {
                self.loss_weights = match value.trim() {
                    "equal" => None,
                    list => Some(list.split(',').map(|v| parse(key, v)).collect::<Result<_>>()?),
                }
            }
            other => return Err(Error::config(other, "unknown setting")),
        }
        Ok(())
    }

    /// Reads `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config("config", alloc::format!("line {}: expected key=value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Every setting as `key=value` lines; [`TrainConfig::from_text`]
    /// reproduces the configuration exactly.
    pub fn to_text(&self) -> String {
        let n = &self.net;
        let r = n.routing;
        let schedule = match &self.schedule {
            LrSchedule::Every(k) => alloc::format!("every:{k}"),
            LrSchedule::At(b) => {
                let list: Vec<String> = b.iter().map(|v| v.to_string()).collect();
                alloc::format!("at:{}", list.join(","))
            }
        };
        let weights = match &self.loss_weights {
            None => String::from("equal"),
            Some(w) => {
                let list: Vec<String> = w.iter().map(|v| alloc::format!("{v:?}")).collect();
                list.join(",")
            }
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn core::fmt::Display| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("width_multiplier", &n.width);
        kv("max_disp", &n.max_disp);
        kv("fine_disp", &n.fine_disp);
        kv("stack_count", &n.stack_count);
        kv("guidance", &n.guidance);
        kv("share_stacks", &n.share_stacks);
        kv("coarsest_prediction", &n.coarsest_prediction);
        kv("local_prior_in_cost", &r.local_prior_in_cost);
        kv("local_details_in_guidance", &r.local_details_in_guidance);
        kv("local_prior_in_sgrm", &r.local_prior_in_sgrm);
        kv("relu_on_reducers", &n.relu_on_reducers);
        kv("height", &self.height);
        kv("width", &self.width);
        kv("lr", &alloc::format!("{:?}", self.lr));
        kv("lr_schedule", &schedule);
        kv("iterations", &self.iterations);
        kv("batch_size", &self.batch_size);
        kv("seed", &self.seed);
        kv("loss_weights", &weights);
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.net.check_resolution(self.height, self.width)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if let Some(w) = &self.loss_weights {
            let expected = 6 + usize::from(self.net.coarsest_prediction) + self.net.stack_count;
            if w.len() != expected {
                return Err(Error::config("loss_weights", alloc::format!("{} weights for {expected} outputs", w.len())));
            }
        }
        Ok(())
    }
}

fn parse_schedule(value: &str) -> Result<LrSchedule> {
    let v = value.trim();
    if let Some(k) = v.strip_prefix("every:") {
        return Ok(LrSchedule::Every(parse("lr_schedule", k)?));
    }
    if let Some(list) = v.strip_prefix("at:") {
        if list.trim().is_empty() {
            return Ok(LrSchedule::At(Vec::new()));
        }
        return Ok(LrSchedule::At(list.split(',').map(|b| parse("lr_schedule", b)).collect::<Result<_>>()?));
    }
    Err(Error::config("lr_schedule", alloc::format!("expected every:N or at:A,B, got {value:?}")))
}

/// Outcome of one optimisation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Iteration index of this step, starting at 0.
    pub iteration: u64,
    pub loss: f64,
    /// `(scale, unweighted l1)` per supervised output.
    pub components: Vec<(u32, f64)>,
    /// Metrics of the final prediction on this batch, before the update.
    pub epe: f64,
    pub three_px: f64,
    pub lr: f64,
}

/// Aggregate metrics over a dataset, with the per-sample values they were
/// computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub epe: f64,
    pub three_px: f64,
    pub per_sample: Vec<(f64, f64)>,
}

impl MetricsReport {
    pub fn from_samples(per_sample: Vec<(f64, f64)>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::Data("no samples to evaluate".into()));
        }
        let n = per_sample.len() as f64;
        let epe = per_sample.iter().map(|p| p.0).sum::<f64>() / n;
        let three_px = per_sample.iter().map(|p| p.1).sum::<f64>() / n;
        Ok(MetricsReport { epe, three_px, per_sample })
    }
}

/// Network, parameters and optimizer state of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub network: Network,
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
    /// Number of completed steps.
    pub iteration: u64,
}

fn mix(seed: u64, stream: u64) -> u64 {
    // SplitMix64 finaliser over the pair.
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Trainer {
    /// Fresh run with parameters drawn from the configured seed.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let network = Network::new(config.net.clone(), &mut params)?;
        params.init_uniform(config.seed);
        let adam = Adam::new(&params);
        Ok(Trainer {
            config,
            network,
            params,
            adam,
            iteration: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.config.schedule.rate(self.config.lr, self.iteration)
    }

    /// Dataset indices used by the step at `iteration`: consecutive slices of
    /// a per-epoch shuffle. Depends only on the seed, so resumed runs see the
    /// same batches.
    pub fn batch_indices(&self, iteration: u64, len: usize) -> Vec<usize> {
        let bs = self.config.batch_size as u64;
        let n = len as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        (0..bs)
            .map(|j| {
                let k = iteration * bs + j;
                let epoch = k / n;
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    let mut perm: Vec<usize> = (0..len).collect();
                    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.config.seed, epoch)));
                    cached = Some((epoch, perm));
                }
                cached.as_ref().expect("filled above").1[(k % n) as usize]
            })
            .collect()
    }

    fn loss_weights(&self) -> Vec<f32> {
        match &self.config.loss_weights {
            Some(w) => w.iter().map(|&v| v as f32).collect(),
            None => self.network.loss_weights(),
        }
    }

    /// One Adam step on the next batch of `data`.
    pub fn step(&mut self, data: &[StereoSample<f32>]) -> Result<StepReport> {
        if data.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let it = self.iteration;
        let at_iteration = |e: Error| match e {
            Error::NonFinite { stage } => Error::NonFinite {
                stage: alloc::format!("iteration {it}: {stage}"),
            },
            other => other,
        };
        let idx = self.batch_indices(it, data.len());
        let parts: Vec<&StereoSample<f32>> = idx.iter().map(|&i| &data[i]).collect();
        let batch = StereoSample::stack(&parts)?;
        let lr = self.lr();
        let weights = self.loss_weights();

        let mut fwd = Forward::new(&self.params, Mode::Train);
        let out = self.network.forward(&mut fwd, &batch.left, &batch.right).map_err(at_iteration)?;
        let preds = out.supervised();
        let loss = multiscale_loss(&mut fwd.tape, &preds, &batch.disparity, &batch.valid, &weights)?;
        let value = fwd.tape.scalar_value(loss.total) as f64;
        if !value.is_finite() {
            return Err(at_iteration(Error::NonFinite { stage: "loss".into() }));
        }
        let pred = fwd.tape.data(out.disparity());
        let batch_epe = epe(pred, batch.disparity.data(), &batch.valid)?;
        let batch_3px = three_px_error(pred, batch.disparity.data(), &batch.valid)?;
        fwd.tape.backward(loss.total)?;
        let grads: Vec<Option<Vec<f32>>> = fwd.param_grads().into_iter().map(|g| g.map(<[f32]>::to_vec)).collect();
        drop(fwd);
        let grads: Vec<Option<&[f32]>> = grads.iter().map(Option::as_deref).collect();
        self.adam.step(&mut self.params, &grads, lr).map_err(at_iteration)?;
        self.iteration += 1;
        Ok(StepReport {
            iteration: it,
            loss: value,
            components: loss.components.iter().map(|&(s, v)| (s, v as f64)).collect(),
            epe: batch_epe,
            three_px: batch_3px,
            lr,
        })
    }

    /// Final disparity for a batch of image pairs.
    pub fn predict(&self, left: &Tensor<f32>, right: &Tensor<f32>) -> Result<Tensor<f32>> {
        predict(&self.network, &self.params, left, right)
    }

    pub fn evaluate(&self, data: &[StereoSample<f32>]) -> Result<MetricsReport> {
        evaluate(&self.network, &self.params, data)
    }
}

/// Inference without recording gradients.
pub fn predict(network: &Network, params: &ParamStore<f32>, left: &Tensor<f32>, right: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut fwd = Forward::new(params, Mode::Infer);
    let out = network.forward(&mut fwd, left, right)?;
    Ok(fwd.tape.value(out.disparity()))
}

/// Batch-1 evaluation: EPE and 3-pixel error per sample over its valid
/// pixels, then averaged over samples.
pub fn evaluate(network: &Network, params: &ParamStore<f32>, data: &[StereoSample<f32>]) -> Result<MetricsReport> {
    let mut per_sample = Vec::with_capacity(data.len());
    for s in data {
        let n = s.left.shape().n;
        for i in 0..n {
            let pred = predict(network, params, &s.left.item(i), &s.right.item(i))?;
            let gt = s.disparity.tensor().item(i);
            let valid = s.valid.item(i);
            per_sample.push((epe(pred.data(), gt.data(), &valid)?, three_px_error(pred.data(), gt.data(), &valid)?));
        }
    }
    MetricsReport::from_samples(per_sample)
}
