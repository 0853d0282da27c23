use std::time::Instant;

use msfnet_core::gradcheck::{cases, check, suite};

const TOLERANCE: f64 = 1e-5;

#[test]
fn every_differentiable_op_passes_finite_differences() {
    let start = Instant::now();
    let results = suite(0).unwrap();
    for r in &results {
        assert!(r.coordinates > 0, "{} checked nothing", r.name);
        assert!(r.max_rel_error < TOLERANCE, "{}: {:e}", r.name, r.max_rel_error);
    }
    assert!(start.elapsed().as_secs() < 120);
}

#[test]
fn suite_covers_the_disparity_paths_and_every_kernel() {
    let names: Vec<&str> = cases().iter().map(|c| c.name).collect();
    for required in [
        "conv2d",
        "conv2d_wide",
        "transpose_conv2d",
        "relu",
        "add",
        "concat_channels",
        "upsample_nearest",
        "correlation_1d",
        "warp_horizontal",
        "compute_guidance",
        "multiscale_loss",
    ] {
        assert!(names.contains(&required), "missing {required}");
    }
    // The warp and guidance cases take the disparity as a checked input.
    for c in cases().iter().filter(|c| c.name == "warp_horizontal" || c.name == "compute_guidance") {
        assert!(c.inputs.iter().any(|(shape, _, _)| shape.c == 1), "{} lacks a disparity input", c.name);
    }
}

#[test]
fn other_seeds_pass_too() {
    for seed in [11, 12] {
        for c in cases() {
            let r = check(&c, seed).unwrap();
            assert!(r.max_rel_error < TOLERANCE, "{} seed {seed}: {:e}", r.name, r.max_rel_error);
        }
    }
}
