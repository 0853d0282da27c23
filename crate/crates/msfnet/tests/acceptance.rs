//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 when
//! any criterion fails. Arguments filter criteria by substring.

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use msfnet::session::{self, RunConfig, SessionOptions};
use msfnet::study::{self, Protocol};
use msfnet::{checkpoint, pfm};
use msfnet_core::graph::wiring_dump;
use msfnet_core::reference::oracle_suite;
use msfnet_core::sgrm::{compute_guidance, zero_heads};
use msfnet_core::synth::{generate_random_dot, DatasetFilterRule, RandomDotSpec, StereoSample};
use msfnet_core::train::{TrainConfig, Trainer};
use msfnet_core::{gradcheck, Forward, Mask, Mode, NetConfig, Network, ParamStore, Shape, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: &str = include_str!("golden/wiring_m1_384x768.txt");
const DESK: RandomDotSpec = RandomDotSpec {
    height: 64,
    width: 128,
    max_disp: 24,
    shape_count: 3,
};
const SEEDS: [u64; 3] = [1, 2, 3];

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn operator_oracles() -> Outcome {
    let start = Instant::now();
    let results = oracle_suite(2024, 150).map_err(err)?;
    let elapsed = start.elapsed();
    let mut ok = elapsed < Duration::from_secs(30);
    let mut parts = Vec::new();
    for r in &results {
        ok &= r.instances >= 100 && r.max_error < 1e-6;
        parts.push(format!("{} {:.1e} over {}", r.name, r.max_error, r.instances));
    }
    check(ok, format!("{} in {:.1} s (limits 1e-6, 30 s)", parts.join(", "), elapsed.as_secs_f64()))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = gradcheck::suite(0).map_err(err)?;
    let elapsed = start.elapsed();
    let worst = results.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).ok_or("empty suite")?;
    let covered = ["warp_horizontal", "compute_guidance"].iter().all(|n| results.iter().any(|r| r.name.starts_with(n)));
    let ok = covered && worst.max_rel_error < 1e-5 && elapsed < Duration::from_secs(120);
    check(
        ok,
        format!(
            "{} cases, worst {} at {:.1e} in {:.1} s (limits 1e-5, 120 s)",
            results.len(),
            worst.name,
            worst.max_rel_error,
            elapsed.as_secs_f64()
        ),
    )
}

fn shape_conformance() -> Outcome {
    let c = TrainConfig::full_width();
    let dump = wiring_dump(&c.net, c.height, c.width).map_err(err)?;
    let identical = dump == GOLDEN;
    let pr1 = dump.lines().find(|l| l.split_whitespace().nth(1) == Some("schm_pr1")).ok_or("no schm_pr1 row")?;
    let full = pr1.split_whitespace().nth(8) == Some("768x384");
    check(identical && full, format!("dump {} golden ({} rows), initial disparity {}", if identical { "==" } else { "!=" }, dump.lines().count(), pr1.split_whitespace().nth(8).unwrap_or("?")))
}

/// Mean of a guidance map over visible pixels.
fn visible_mean(fwd: &Forward<'_, f32>, g: msfnet_core::Var, visible: &Mask) -> f64 {
    let plane = visible.shape().len();
    let (sum, n) = fwd
        .tape
        .data(g)
        .iter()
        .enumerate()
        .filter(|(i, _)| visible.data()[i % plane])
        .fold((0.0, 0usize), |(s, n), (_, &v)| (s + v as f64, n + 1));
    sum / n as f64
}

fn guidance_nullity() -> Outcome {
    let store = ParamStore::<f32>::new();
    // Exact nullity: left details built as the warped right details.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = Shape::new(2, 4, 16, 40);
    let right = Tensor::from_fn(shape, |_, _, _, _| rng.gen::<f32>());
    let disp = Tensor::from_fn(shape.with_c(1), |_, _, _, _| rng.gen_range(-3.0..45.0));
    let mut fwd = Forward::new(&store, Mode::Infer);
    let (rv, dv) = (fwd.input(&right, "right"), fwd.input(&disp, "disparity"));
    let left = fwd.tape.warp_horizontal(rv, dv).map_err(err)?;
    let g = compute_guidance(&mut fwd, dv, left, rv, "").map_err(err)?;
    let exact = fwd.tape.data(g).iter().all(|&v| v == 0.0);

    let (mut at_gt, mut at_zero) = (0.0, 0.0);
    for seed in 0..16 {
        let s = generate_random_dot(seed, DESK).map_err(err)?;
        let mut fwd = Forward::new(&store, Mode::Infer);
        let (l, r) = (fwd.input(&s.left, "left"), fwd.input(&s.right, "right"));
        let gt = fwd.input(s.disparity.tensor(), "gt");
        let zero = fwd.input(&Tensor::zeros(s.disparity.shape()), "zero");
        let g_gt = compute_guidance(&mut fwd, gt, l, r, "").map_err(err)?;
        let g_zero = compute_guidance(&mut fwd, zero, l, r, "").map_err(err)?;
        let visible = s.visible();
        at_gt += visible_mean(&fwd, g_gt, &visible) / 16.0;
        at_zero += visible_mean(&fwd, g_zero, &visible) / 16.0;
    }
    let ratio = at_gt / at_zero;
    check(exact && ratio < 0.1, format!("aligned guidance exactly zero: {exact}; random-dot mean {at_gt:.2e} vs zero-disparity {at_zero:.3} (ratio {ratio:.1e}, limit 0.1)"))
}

fn residual_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let image = |rng: &mut ChaCha8Rng| Tensor::from_fn(Shape::new(1, 3, 64, 128), |_, _, _, _| rng.gen::<f32>());
    let (left, right) = (image(&mut rng), image(&mut rng));
    let mut store = ParamStore::new();
    let net = Network::new(NetConfig::desk(), &mut store).map_err(err)?;
    store.init_uniform(11);

    let mut fwd = Forward::new(&store, Mode::Infer);
    let out = net.forward(&mut fwd, &left, &right).map_err(err)?;
    let mut sum: Vec<f64> = fwd.tape.data(out.schm.initial).iter().map(|&v| v as f64).collect();
    for &r in &out.sgrm.residuals {
        sum.iter_mut().zip(fwd.tape.data(r)).for_each(|(a, &b)| *a += b as f64);
    }
    let worst = sum.iter().zip(fwd.tape.data(out.disparity())).map(|(a, &b)| (a - b as f64).abs()).fold(0.0, f64::max);
    drop(fwd);

    zero_heads(&net.sgrm, &mut store);
    let mut fwd = Forward::new(&store, Mode::Infer);
    let out = net.forward(&mut fwd, &left, &right).map_err(err)?;
    let passthrough = fwd.tape.data(out.disparity()) == fwd.tape.data(out.schm.initial);
    check(worst <= 1e-6 && passthrough, format!("max |output - initial - sum residuals| {worst:.1e} (limit 1e-6); zero heads pass through exactly: {passthrough}"))
}

fn overfit_benchmark() -> Outcome {
    let run = RunConfig::default();
    let (train_set, _) = run.data.load(&run.train).map_err(err)?;
    let c = &run.train;
    let shape_ok = c.net.width.to_string() == "1/8" && (c.height, c.width) == (64, 128) && train_set.len() == 8 && c.iterations <= 2000;
    let start = Instant::now();
    let mut trainer = Trainer::new(c.clone()).map_err(err)?;
    let options = SessionOptions::default();
    session::run(&mut trainer, &train_set, &[], c.iterations, &options, |_| {}).map_err(err)?;
    let elapsed = start.elapsed();
    let m = trainer.evaluate(&train_set).map_err(err)?;
    let ok = shape_ok && m.epe < 1.0 && m.three_px < 5.0 && elapsed < Duration::from_secs(15 * 60);
    check(
        ok,
        format!(
            "m {} {}x{}, {} samples, {} iterations: EPE {:.3} px, 3px {:.2}% in {:.0} s (limits 1.0, 5%, 900 s)",
            c.net.width,
            c.height,
            c.width,
            train_set.len(),
            c.iterations,
            m.epe,
            m.three_px,
            elapsed.as_secs_f64()
        ),
    )
}

/// Validation EPE of each study arm, computed once per seed.
struct Study {
    /// Per seed: guidance off, then stacks 1, 2, 3 with guidance on.
    arms: Vec<[f64; 4]>,
}

impl Study {
    fn run() -> Result<Study, String> {
        let p = Protocol::default();
        let epe = |seed, kv: &[(&str, &str)]| study::validation_metrics(seed, kv, p).map(|m| m.epe).map_err(err);
        let mut arms = Vec::new();
        for seed in SEEDS {
            arms.push([
                epe(seed, &[("guidance", "false")])?,
                epe(seed, &[("stack_count", "1")])?,
                epe(seed, &[("stack_count", "2")])?,
                epe(seed, &[("stack_count", "3")])?,
            ]);
        }
        Ok(Study { arms })
    }
}

fn guidance_ablation(study: &Study) -> Outcome {
    let wins = study.arms.iter().filter(|a| a[3] < a[0]).count();
    let pairs: Vec<String> = SEEDS.iter().zip(&study.arms).map(|(s, a)| format!("seed {s} {:.4} vs {:.4}", a[3], a[0])).collect();
    check(wins == SEEDS.len(), format!("enabled vs disabled validation EPE: {} ({wins}/3 strict wins, need 3)", pairs.join(", ")))
}

fn stack_trend(study: &Study) -> Outcome {
    let monotone = study.arms.iter().filter(|a| a[1] >= a[2] && a[2] >= a[3]).count();
    let rows: Vec<String> = SEEDS.iter().zip(&study.arms).map(|(s, a)| format!("seed {s} {:.4}/{:.4}/{:.4}", a[1], a[2], a[3])).collect();
    check(monotone >= 2, format!("validation EPE for 1/2/3 stacks: {} ({monotone}/3 non-increasing, need 2)", rows.join(", ")))
}

fn warp_residual(s: &StereoSample<f32>) -> Result<f64, String> {
    let mut tape = Tape::<f32>::new();
    let r = tape.constant(s.right.clone());
    let d = tape.constant(s.disparity.tensor().clone());
    let w = tape.warp_horizontal(r, d).map_err(err)?;
    let visible = s.visible();
    let plane = visible.shape().len();
    Ok(s.left
        .data()
        .iter()
        .zip(tape.data(w))
        .enumerate()
        .filter(|(i, _)| visible.data()[i % plane])
        .map(|(_, (&a, &b))| (a - b).abs() as f64)
        .fold(0.0, f64::max))
}

fn data_and_io() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        worst = worst.max(warp_residual(&generate_random_dot(seed, DESK).map_err(err)?)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut exact = true;
    for _ in 0..1000 {
        let shape = Shape::new(1, 1, rng.gen_range(1..24), rng.gen_range(1..24));
        let map = Tensor::from_fn(shape, |_, _, _, _| f32::from_bits(rng.gen()));
        let back = pfm::decode(&pfm::encode(&map).map_err(err)?).map_err(err)?;
        exact &= back.shape() == shape && back.data().iter().zip(map.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    let valid = Mask::all(Shape::new(1, 1, 4, 4));
    let mut quarter = [0.0f32; 16];
    quarter[..4].fill(301.0);
    let kept = DatasetFilterRule::default().keep(&quarter, &valid).map_err(err)?;
    check(worst < 1e-6 && exact && kept, format!("warp residual {worst:.1e} over 100 samples (limit 1e-6); 1000 PFM maps bit-exact: {exact}; 25% boundary kept: {kept}"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut run = RunConfig::default();
    run.train.iterations = 600;
    let (train_set, val_set) = run.data.load(&run.train).map_err(err)?;
    let go = |name: &str, until: u64, resume: Option<&std::path::Path>| -> Result<Trainer, String> {
        let mut t = match resume {
            Some(p) => checkpoint::load(p).map_err(err)?,
            None => Trainer::new(run.train.clone()).map_err(err)?,
        };
        let options = SessionOptions {
            out_dir: Some(dir.path().join(name)),
            eval_every: 100,
            checkpoint_every: 500,
        };
        session::run(&mut t, &train_set, &val_set, until, &options, |_| {}).map_err(err)?;
        Ok(t)
    };
    let metrics = |name: &str| fs::read(dir.path().join(name).join(session::METRICS_FILE)).map_err(err);
    let a = go("a", 600, None)?;
    let b = go("b", 600, None)?;
    let identical = metrics("a")? == metrics("b")? && a.params == b.params;

    go("c", 500, None)?;
    let ckpt = dir.path().join("c").join(session::checkpoint_name(500));
    let c = go("c", 600, Some(&ckpt))?;
    let resumed = metrics("c")? == metrics("a")? && c.params == a.params && c.adam.m == a.adam.m && c.adam.v == a.adam.v;
    check(identical && resumed, format!("two seeded 600-iteration runs identical: {identical}; resume at 500 matches through 600: {resumed}"))
}

/// Criteria share the lazily trained study arms.
type Criterion = dyn Fn(&mut Option<Result<Study, String>>) -> Outcome;

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));
    let mut study: Option<Result<Study, String>> = None;
    let mut failures = 0;
    let criteria: [(&str, &Criterion); 10] = [
        ("operator oracles", &|_| operator_oracles()),
        ("gradient suite", &|_| gradient_suite()),
        ("shape conformance", &|_| shape_conformance()),
        ("guidance nullity", &|_| guidance_nullity()),
        ("residual identity", &|_| residual_identity()),
        ("overfit benchmark", &|_| overfit_benchmark()),
        ("guidance ablation", &|s| guidance_ablation(s.get_or_insert_with(Study::run).as_ref().map_err(Clone::clone)?)),
        ("stack-count trend", &|s| stack_trend(s.get_or_insert_with(Study::run).as_ref().map_err(Clone::clone)?)),
        ("data and io", &|_| data_and_io()),
        ("determinism", &|_| determinism()),
    ];
    for (name, criterion) in criteria {
        if !wanted(name) {
            continue;
        }
        match criterion(&mut study) {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
