use std::fs;
use std::path::Path;

use msfnet::checkpoint;
use msfnet::session::{self, RunConfig, SessionOptions};
use msfnet::study::{arm_config, Protocol};
use msfnet_core::train::Trainer;

fn small_run() -> RunConfig {
    let mut run = RunConfig::default();
    run.apply_text("samples=4\nval_samples=2\nstack_count=1\nseed=3\n").unwrap();
    run
}

fn train(run: &RunConfig, out: &Path, until: u64, resume: Option<&Path>) -> Trainer {
    let (train_set, val_set) = run.data.load(&run.train).unwrap();
    let mut trainer = match resume {
        Some(p) => checkpoint::load(p).unwrap(),
        None => Trainer::new(run.train.clone()).unwrap(),
    };
    let options = SessionOptions {
        out_dir: Some(out.to_path_buf()),
        eval_every: 4,
        checkpoint_every: 5,
    };
    session::run(&mut trainer, &train_set, &val_set, until, &options, |_| {}).unwrap();
    trainer
}

#[test]
fn identical_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let run = small_run();
    train(&run, &dir.path().join("a"), 6, None);
    train(&run, &dir.path().join("b"), 6, None);
    let a = fs::read(dir.path().join("a").join(session::METRICS_FILE)).unwrap();
    let b = fs::read(dir.path().join("b").join(session::METRICS_FILE)).unwrap();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 7);
}

#[test]
fn resuming_a_checkpoint_continues_the_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let run = small_run();
    let whole = train(&run, &dir.path().join("whole"), 8, None);

    let part = dir.path().join("part");
    train(&run, &part, 5, None);
    let ckpt = part.join(session::checkpoint_name(5));
    assert!(ckpt.exists());
    let resumed = train(&run, &part, 8, Some(&ckpt));
    assert_eq!(resumed.params, whole.params);
    assert_eq!(resumed.adam.m, whole.adam.m);
    let a = fs::read_to_string(dir.path().join("whole").join(session::METRICS_FILE)).unwrap();
    let b = fs::read_to_string(part.join(session::METRICS_FILE)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn configuration_files_reach_both_data_and_training_settings() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    fs::write(&path, "# desk run\nsamples = 12\nguidance = false\nlr_schedule = at:10,20\n\neval_every=7\n").unwrap();
    let run = RunConfig::from_file(&path).unwrap();
    assert_eq!(run.data.samples, 12);
    assert!(!run.train.net.guidance);
    assert_eq!(run.eval_every, 7);
    fs::write(&path, "samples\n").unwrap();
    let e = RunConfig::from_file(&path).unwrap_err().to_string();
    assert!(e.contains("run.cfg") && e.contains("line 1"), "{e}");
}

#[test]
fn study_arms_differ_only_in_their_overrides() {
    let p = Protocol::default();
    let on = arm_config(2, &[("guidance", "true")], p).unwrap();
    let mut off = arm_config(2, &[("guidance", "false")], p).unwrap();
    assert_ne!(on, off);
    off.train.net.guidance = true;
    assert_eq!(on, off);
    let (train_a, val_a) = on.data.load(&on.train).unwrap();
    assert_eq!((train_a.len(), val_a.len()), (p.train_samples, p.val_samples));
    // Validation pairs never repeat a training pair.
    assert!(val_a.iter().all(|v| train_a.iter().all(|t| t.left != v.left)));
}
