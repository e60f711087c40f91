//! Shared fixtures for the criterion benches.

use patchtrack::eval::bench::{bench_pair, bench_points};
use patchtrack::imgproc::{Image, Keypoint};
use patchtrack::net::{init_params, ArchSpec, ParamSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn params() -> ParamSet<f32> {
    init_params(&ArchSpec::default(), &mut ChaCha8Rng::seed_from_u64(0))
}

/// Textured pair shifted by (3, 2) and `n` points at least `margin` inside.
pub fn scene(width: usize, height: usize, n: usize, margin: usize) -> (Image, Image, Vec<Keypoint>) {
    let (a, b) = bench_pair(width, height, 0).expect("valid size");
    let pts = bench_points(&a, n, margin);
    (a, b, pts)
}
