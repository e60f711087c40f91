//! Analytic FLOPs and wall-clock throughput per resolution and mode.
//!
//! FLOP figures are exact integers. Timings run on a dedicated pool of
//! `threads` workers (1 by default).

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::imgproc::{detect_keypoints, downsample, warp_homography, DetectConfig, Homography, Image, Keypoint};
use crate::infer::{match_points, MatchMode, PeakConfig, PointResult, PyramidConfig};
use crate::net::ParamSet;
use crate::patches::{extract_patch, Patch};

use super::synth::{quantize, render_texture, Texture};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Single,
    Pyramid,
}

impl BenchMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "pyramid" => Ok(Self::Pyramid),
            o => Err(Error::Config(format!("unknown bench mode `{o}`"))),
        }
    }

    /// Single mode uses the resolution's level-1 side at full resolution.
    pub fn match_mode(&self, height: usize, peak: PeakConfig) -> MatchMode {
        let side = PyramidConfig::level1_for_height(height);
        match self {
            Self::Single => MatchMode::Single { patch_side: side, peak },
            Self::Pyramid => MatchMode::Pyramid(PyramidConfig {
                peak,
                ..PyramidConfig::for_resolution(height)
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub resolutions: Vec<(usize, usize)>,
    pub modes: Vec<BenchMode>,
    pub points: usize,
    pub reps: usize,
    pub seed: u64,
    pub threads: usize,
    pub peak: PeakConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![(640, 480), (1280, 720), (1920, 1080)],
            modes: vec![BenchMode::Single, BenchMode::Pyramid],
            points: 200,
            reps: 3,
            seed: 0,
            threads: 1,
            peak: PeakConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Timing {
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub samples_ms: Vec<f64>,
}

impl Timing {
    pub fn from_samples(mut s: Vec<f64>) -> Self {
        let raw = s.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        let median = if n == 0 {
            0.0
        } else if n % 2 == 1 {
            s[n / 2]
        } else {
            0.5 * (s[n / 2 - 1] + s[n / 2])
        };
        Self {
            median_ms: median,
            min_ms: s.first().copied().unwrap_or(0.0),
            max_ms: s.last().copied().unwrap_or(0.0),
            samples_ms: raw,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchEntry {
    pub width: usize,
    pub height: usize,
    pub mode: BenchMode,
    /// Patch side read from the images (level-1 side in pyramid mode).
    pub patch_side: usize,
    pub points: usize,
    pub flops_per_point_per_image: u64,
    /// Both images of the pair, all points.
    pub flops_per_frame: u64,
    pub gflops_per_frame: f64,
    pub network_only: Timing,
    pub end_to_end: Timing,
    pub fps: f64,
    pub matched: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub available_cpus: usize,
    pub threads: usize,
    pub crate_version: String,
    pub debug_assertions: bool,
}

impl Environment {
    pub fn current(threads: usize) -> Self {
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            available_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            threads,
            crate_version: env!("CARGO_PKG_VERSION").into(),
            debug_assertions: cfg!(debug_assertions),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub arch: String,
    pub param_count: usize,
    pub reps: usize,
    pub entries: Vec<BenchEntry>,
    pub environment: Environment,
}

impl BenchReport {
    pub fn entry(&self, height: usize, mode: BenchMode) -> Option<&BenchEntry> {
        self.entries.iter().find(|e| e.height == height && e.mode == mode)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }
}

/// Synthetic textured pair at one resolution; the second image is shifted
/// by (3, 2) pixels.
pub fn bench_pair(width: usize, height: usize, seed: u64) -> Result<(Image, Image)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((width as u64) << 32 | height as u64));
    let a = quantize(&render_texture(Texture::Mixed, width, height, &mut rng)?);
    let b = quantize(&warp_homography(&a, &Homography::translation(3.0, 2.0))?);
    Ok((a, b))
}

/// Up to `n` FAST points keeping `margin` from the border, topped up with a
/// regular grid.
pub fn bench_points(img: &Image, n: usize, margin: usize) -> Vec<Keypoint> {
    let m = margin as f32;
    let (w, h) = (img.width() as f32, img.height() as f32);
    let inside = |k: &Keypoint| k.x >= m && k.y >= m && k.x < w - m && k.y < h - m;
    let cfg = DetectConfig {
        max_points: n,
        ..DetectConfig::default()
    };
    let mut pts: Vec<Keypoint> = detect_keypoints(img, &cfg).into_iter().filter(inside).take(n).collect();
    let missing = n - pts.len();
    if missing > 0 {
        let cols = (missing as f64).sqrt().ceil() as usize;
        let rows = missing.div_ceil(cols);
        let (sx, sy) = ((w - 2.0 * m) / cols as f32, (h - 2.0 * m) / rows as f32);
        for i in 0..missing {
            let (c, r) = (i % cols, i / cols);
            pts.push(Keypoint::new(m + (c as f32 + 0.5) * sx, m + (r as f32 + 0.5) * sy));
        }
    }
    pts
}

/// The patches the network sees for one frame, without the matching logic.
fn network_inputs(a: &Image, b: &Image, kps: &[Keypoint], mode: &MatchMode) -> Result<Vec<Patch>> {
    let mut out = Vec::new();
    for k in kps {
        match mode {
            MatchMode::Single { patch_side, .. } => {
                out.push(extract_patch(a, k, *patch_side)?);
                out.push(extract_patch(b, k, *patch_side)?);
            }
            MatchMode::Pyramid(c) => {
                for img in [a, b] {
                    let p = extract_patch(img, k, c.level1_side)?;
                    out.push(Patch {
                        pixels: downsample(&p.pixels, c.factor())?,
                        ..p
                    });
                    let fine = extract_patch(img, k, c.level2_side)?;
                    if c.factor() > 1 {
                        out.push(fine);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn run_entry(params: &ParamSet<f32>, cfg: &BenchConfig, (w, h): (usize, usize), mode: BenchMode) -> Result<BenchEntry> {
    let mm = mode.match_mode(h, cfg.peak);
    let side = mm.outer_side();
    let (a, b) = bench_pair(w, h, cfg.seed)?;
    let pts = bench_points(&a, cfg.points, side / 2 + 8);
    let inputs = network_inputs(&a, &b, &pts, &mm)?;
    let per_point = mm.flops_per_point(params.arch())?;
    let flops = per_point * 2 * pts.len() as u64;
    let (mut net, mut e2e) = (Vec::new(), Vec::new());
    let mut matched = 0;
    for _ in 0..cfg.reps.max(1) {
        let t = Instant::now();
        for p in &inputs {
            std::hint::black_box(params.forward(p)?);
        }
        net.push(ms(t));
        let t = Instant::now();
        let kps = bench_points(&a, cfg.points, side / 2 + 8);
        let res = match_points(params, &a, &b, &kps, &mm, None)?;
        e2e.push(ms(t));
        matched = res.iter().filter(|r| matches!(r, PointResult::Matched(_))).count();
    }
    let end_to_end = Timing::from_samples(e2e);
    Ok(BenchEntry {
        width: w,
        height: h,
        mode,
        patch_side: side,
        points: pts.len(),
        flops_per_point_per_image: per_point,
        flops_per_frame: flops,
        gflops_per_frame: flops as f64 / 1e9,
        network_only: Timing::from_samples(net),
        fps: if end_to_end.median_ms > 0.0 { 1e3 / end_to_end.median_ms } else { 0.0 },
        end_to_end,
        matched,
    })
}

pub fn bench(params: &ParamSet<f32>, cfg: &BenchConfig) -> Result<BenchReport> {
    let threads = cfg.threads.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let entries = pool.install(|| -> Result<Vec<BenchEntry>> {
        let mut v = Vec::new();
        for &res in &cfg.resolutions {
            for &m in &cfg.modes {
                log::info!("bench {}x{} {:?}", res.0, res.1, m);
                v.push(run_entry(params, cfg, res, m)?);
            }
        }
        Ok(v)
    })?;
    Ok(BenchReport {
        arch: params.arch().to_text(),
        param_count: params.param_count(),
        reps: cfg.reps.max(1),
        entries,
        environment: Environment::current(threads),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timing_median_and_spread() {
        let t = Timing::from_samples(vec![3.0, 1.0, 2.0, 10.0]);
        assert_eq!((t.median_ms, t.min_ms, t.max_ms), (2.5, 1.0, 10.0));
    }

    #[test]
    fn points_are_topped_up() {
        let img = Image::filled(200, 100, 0.5);
        let pts = bench_points(&img, 12, 20);
        assert_eq!(pts.len(), 12);
        assert!(pts.iter().all(|k| k.x >= 20.0 && k.x < 180.0 && k.y >= 20.0 && k.y < 80.0));
    }
}
