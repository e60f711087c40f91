//! Deployment-path matching: single-patch, coarse-to-fine pyramid and a
//! streaming multi-frame tracker.
//!
//! Each keypoint is matched independently, so points run in parallel over a
//! shared immutable [`ParamSet`] and results are collected in input order.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::imgproc::{detect_keypoints, downsample, DetectConfig, Image, Keypoint};
use crate::matching::{probability_map, refine_peak, sample_probability, similarity_map, SimilarityMap};
use crate::net::{count_flops, sample_descriptor, ArchSpec, ParamSet};
use crate::patches::{centered_origin, extract_patch, Patch};

/// Side of the full-resolution refinement patch.
pub const LEVEL2_SIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Correspondence {
    pub src: Keypoint,
    pub dst: Keypoint,
    pub confidence: f32,
    /// `-1` outside the stream tracker.
    pub track_id: i64,
}

/// Peak extraction and acceptance settings shared by all modes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeakConfig {
    pub soft_window: usize,
    pub soft_temperature: f32,
    pub prob_temperature: f32,
    /// Minimum peak probability; `None` means twice the uniform probability.
    pub confidence_floor: Option<f32>,
}

impl Default for PeakConfig {
    fn default() -> Self {
        Self {
            soft_window: crate::matching::DEFAULT_SOFT_WINDOW,
            soft_temperature: crate::matching::DEFAULT_SOFT_TEMPERATURE as f32,
            prob_temperature: crate::matching::DEFAULT_PROB_TEMPERATURE as f32,
            confidence_floor: None,
        }
    }
}

impl PeakConfig {
    fn floor(&self, w: usize, h: usize) -> f32 {
        self.confidence_floor.unwrap_or(2.0 / (w * h) as f32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PyramidConfig {
    /// Side of the level-1 patch before downsampling.
    pub level1_side: usize,
    /// Side of the downsampled level-1 patch and of the level-2 patch.
    pub level2_side: usize,
    pub peak: PeakConfig,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            level1_side: 128,
            level2_side: LEVEL2_SIDE,
            peak: PeakConfig::default(),
        }
    }
}

impl PyramidConfig {
    /// Level-1 side for an image height: 32 up to 480 rows, 64 up to 720,
    /// 128 up to 1080 and 256 beyond.
    pub fn level1_for_height(height: usize) -> usize {
        match height {
            0..=480 => 32,
            481..=720 => 64,
            721..=1080 => 128,
            _ => 256,
        }
    }

    pub fn for_resolution(height: usize) -> Self {
        Self {
            level1_side: Self::level1_for_height(height),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (l1, l2) = (self.level1_side, self.level2_side);
        if l1 < l2 || l1 % 4 != 0 || l2 % 4 != 0 || l1 % l2 != 0 || !(l1 / l2).is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "pyramid sides {l1}/{l2}: level 1 must be a power-of-two multiple of level 2, both multiples of 4"
            )));
        }
        Ok(())
    }

    pub fn factor(&self) -> usize {
        self.level1_side / self.level2_side
    }
}

/// How a pair of frames is matched.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MatchMode {
    Single { patch_side: usize, peak: PeakConfig },
    Pyramid(PyramidConfig),
}

impl MatchMode {
    pub fn single(patch_side: usize) -> Self {
        Self::Single {
            patch_side,
            peak: PeakConfig::default(),
        }
    }

    /// Largest patch side read from either image.
    pub fn outer_side(&self) -> usize {
        match self {
            Self::Single { patch_side, .. } => *patch_side,
            Self::Pyramid(c) => c.level1_side,
        }
    }

    /// Analytic FLOPs per point per image: one pass at the patch side in
    /// single mode, two passes at the level-2 side in pyramid mode.
    pub fn flops_per_point(&self, arch: &ArchSpec) -> Result<u64> {
        Ok(match self {
            Self::Single { patch_side, .. } => count_flops(arch, *patch_side)?.total(),
            Self::Pyramid(c) => 2 * count_flops(arch, c.level2_side)?.total(),
        })
    }
}

/// Outcome for one input keypoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PointResult {
    Matched(Correspondence),
    /// A required patch does not fit inside its image.
    Border,
    /// Peak probability under the floor.
    LowConfidence,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrackOutput {
    pub correspondences: Vec<Correspondence>,
    pub border_skipped: usize,
    pub low_confidence: usize,
}

impl TrackOutput {
    fn from_results(results: Vec<PointResult>) -> Self {
        let mut out = Self::default();
        for r in results {
            match r {
                PointResult::Matched(c) => out.correspondences.push(c),
                PointResult::Border => out.border_skipped += 1,
                PointResult::LowConfidence => out.low_confidence += 1,
            }
        }
        out
    }
}

/// Matches the keypoint of `pa` into `pb`; returns the sub-pixel estimate in
/// `pb` local coordinates and its peak probability.
fn match_local(params: &ParamSet<f32>, pa: &Patch, kp_local: (f32, f32), pb: &Patch, peak: &PeakConfig) -> Result<((f32, f32), f32, f32)> {
    let da = params.forward(pa)?;
    let d = sample_descriptor(&da, kp_local.0, kp_local.1)?;
    let db = params.forward(pb)?;
    let sim: SimilarityMap<f32> = similarity_map(&db, &d)?;
    let (x, y) = refine_peak(&sim, peak.soft_window, peak.soft_temperature);
    let p = probability_map(&sim, peak.prob_temperature);
    let conf = sample_probability(&p, x, y)?.clamp(0.0, 1.0);
    Ok(((x, y), conf, peak.floor(sim.width, sim.height)))
}

fn finish(src: Keypoint, dst: (f32, f32), conf: f32, floor: f32) -> PointResult {
    if conf < floor {
        PointResult::LowConfidence
    } else {
        PointResult::Matched(Correspondence {
            src,
            dst: Keypoint::new(dst.0, dst.1),
            confidence: conf,
            track_id: -1,
        })
    }
}

fn single_point(params: &ParamSet<f32>, a: &Image, b: &Image, kp: Keypoint, prior: Keypoint, side: usize, peak: &PeakConfig) -> Result<PointResult> {
    let (Ok(pa), Ok(pb)) = (extract_patch(a, &kp, side), extract_patch(b, &prior, side)) else {
        return Ok(PointResult::Border);
    };
    let (est, conf, floor) = match_local(params, &pa, (pa.kp_local_x, pa.kp_local_y), &pb, peak)?;
    Ok(finish(kp, pb.to_image(est.0, est.1), conf, floor))
}

fn downsampled(p: &Patch, f: usize) -> Result<Patch> {
    Ok(Patch {
        pixels: downsample(&p.pixels, f)?,
        origin_x: 0,
        origin_y: 0,
        kp_local_x: 0.0,
        kp_local_y: 0.0,
    })
}

/// Side-`side` patch centred on `c`, shifted to lie inside `img`.
fn clamped_patch(img: &Image, c: (f32, f32), side: usize) -> Result<Patch> {
    let (ox, oy) = centered_origin(&Keypoint::new(c.0, c.1), side);
    let ox = ox.clamp(0, (img.width() - side) as i64) as usize;
    let oy = oy.clamp(0, (img.height() - side) as i64) as usize;
    Ok(Patch {
        pixels: img.crop(ox, oy, side, side)?,
        origin_x: ox,
        origin_y: oy,
        kp_local_x: c.0 - ox as f32,
        kp_local_y: c.1 - oy as f32,
    })
}

fn pyramid_point(params: &ParamSet<f32>, a: &Image, b: &Image, kp: Keypoint, prior: Keypoint, cfg: &PyramidConfig) -> Result<PointResult> {
    let f = cfg.factor();
    if f == 1 {
        return single_point(params, a, b, kp, prior, cfg.level2_side, &cfg.peak);
    }
    let (Ok(pa), Ok(pb)) = (extract_patch(a, &kp, cfg.level1_side), extract_patch(b, &prior, cfg.level1_side)) else {
        return Ok(PointResult::Border);
    };
    // coarse pixel j covers fine pixels j·f .. j·f + f − 1
    let half = (f as f32 - 1.0) / 2.0;
    let to_coarse = |v: f32| (v - half) / f as f32;
    let max = (cfg.level2_side - 1) as f32;
    let kc = (to_coarse(pa.kp_local_x).clamp(0.0, max), to_coarse(pa.kp_local_y).clamp(0.0, max));
    let (est, _, _) = match_local(params, &downsampled(&pa, f)?, kc, &downsampled(&pb, f)?, &cfg.peak)?;
    let coarse = pb.to_image(est.0 * f as f32 + half, est.1 * f as f32 + half);
    let Ok(fa) = extract_patch(a, &kp, cfg.level2_side) else {
        return Ok(PointResult::Border);
    };
    let fb = clamped_patch(b, coarse, cfg.level2_side)?;
    let (est, conf, floor) = match_local(params, &fa, (fa.kp_local_x, fa.kp_local_y), &fb, &cfg.peak)?;
    Ok(finish(kp, fb.to_image(est.0, est.1), conf, floor))
}

fn check_prior(kps: &[Keypoint], prior: Option<&[Keypoint]>) -> Result<()> {
    match prior {
        Some(p) if p.len() != kps.len() => Err(Error::SizeMismatch(format!("{} priors for {} keypoints", p.len(), kps.len()))),
        _ => Ok(()),
    }
}

/// Per-keypoint outcomes in input order. The search location in `b` defaults
/// to the keypoint's own coordinates.
pub fn match_points(
    params: &ParamSet<f32>,
    a: &Image,
    b: &Image,
    kps: &[Keypoint],
    mode: &MatchMode,
    prior: Option<&[Keypoint]>,
) -> Result<Vec<PointResult>> {
    check_prior(kps, prior)?;
    if let MatchMode::Pyramid(c) = mode {
        c.validate()?;
    }
    kps.par_iter()
        .enumerate()
        .map(|(i, &kp)| {
            let pr = prior.map_or(kp, |p| p[i]);
            match mode {
                MatchMode::Single { patch_side, peak } => single_point(params, a, b, kp, pr, *patch_side, peak),
                MatchMode::Pyramid(c) => pyramid_point(params, a, b, kp, pr, c),
            }
        })
        .collect()
}

/// Single-patch matching at one patch side.
pub fn track_single(
    params: &ParamSet<f32>,
    a: &Image,
    b: &Image,
    kps: &[Keypoint],
    patch_side: usize,
    prior: Option<&[Keypoint]>,
) -> Result<TrackOutput> {
    track_pair(params, a, b, kps, &MatchMode::single(patch_side), prior)
}

/// Coarse-to-fine matching: a downsampled level-1 patch localises, a
/// full-resolution level-2 patch around the coarse estimate refines.
pub fn track_pyramid(
    params: &ParamSet<f32>,
    a: &Image,
    b: &Image,
    kps: &[Keypoint],
    cfg: &PyramidConfig,
    prior: Option<&[Keypoint]>,
) -> Result<TrackOutput> {
    track_pair(params, a, b, kps, &MatchMode::Pyramid(*cfg), prior)
}

pub fn track_pair(
    params: &ParamSet<f32>,
    a: &Image,
    b: &Image,
    kps: &[Keypoint],
    mode: &MatchMode,
    prior: Option<&[Keypoint]>,
) -> Result<TrackOutput> {
    Ok(TrackOutput::from_results(match_points(params, a, b, kps, mode, prior)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamConfig {
    pub mode: MatchMode,
    /// Maximum number of live tracks.
    pub budget: usize,
    pub detect: DetectConfig,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            mode: MatchMode::single(32),
            budget: 200,
            detect: DetectConfig::default(),
        }
    }
}

/// Lifetime of one track; `positions[i]` is in frame `start + i`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrackRecord {
    pub id: i64,
    pub start: usize,
    pub positions: Vec<Keypoint>,
}

impl TrackRecord {
    pub fn last_frame(&self) -> usize {
        self.start + self.positions.len() - 1
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StreamOutput {
    /// Correspondences from frame `i` to frame `i + 1`.
    pub per_frame: Vec<Vec<Correspondence>>,
    pub tracks: Vec<TrackRecord>,
    /// Live track count after each frame is processed.
    pub live_counts: Vec<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct StreamStats {
    pub tracks: usize,
    pub mean_length: f64,
    pub max_length: usize,
    pub max_live: usize,
}

impl StreamOutput {
    pub fn stats(&self) -> StreamStats {
        let n = self.tracks.len();
        let total: usize = self.tracks.iter().map(|t| t.positions.len()).sum();
        StreamStats {
            tracks: n,
            mean_length: if n == 0 { 0.0 } else { total as f64 / n as f64 },
            max_length: self.tracks.iter().map(|t| t.positions.len()).max().unwrap_or(0),
            max_live: self.live_counts.iter().copied().max().unwrap_or(0),
        }
    }
}

fn replenish(frame: &Image, cfg: &StreamConfig, live: &[Keypoint], room: usize) -> Vec<Keypoint> {
    if room == 0 {
        return Vec::new();
    }
    let half = (cfg.mode.outer_side() / 2 + 1) as f32;
    let (w, h) = (frame.width() as f32, frame.height() as f32);
    let r2 = cfg.detect.nms_radius * cfg.detect.nms_radius;
    detect_keypoints(frame, &cfg.detect)
        .into_iter()
        .filter(|k| k.x >= half && k.y >= half && k.x < w - half && k.y < h - half)
        .filter(|k| live.iter().all(|l| (l.x - k.x).powi(2) + (l.y - k.y).powi(2) > r2))
        .take(room)
        .collect()
}

/// Tracks FAST points through `frames`, matching each frame against the
/// previous positions and replenishing up to the budget.
pub fn track_stream(params: &ParamSet<f32>, frames: &[Image], cfg: &StreamConfig) -> Result<StreamOutput> {
    if frames.len() < 2 {
        return Err(Error::InvalidArgument("stream tracking needs at least two frames".into()));
    }
    let mut out = StreamOutput::default();
    let mut live: Vec<usize> = Vec::new();
    for k in replenish(&frames[0], cfg, &[], cfg.budget) {
        live.push(out.tracks.len());
        out.tracks.push(TrackRecord {
            id: out.tracks.len() as i64,
            start: 0,
            positions: vec![k],
        });
    }
    out.live_counts.push(live.len());
    for t in 1..frames.len() {
        let kps: Vec<Keypoint> = live.iter().map(|&i| *out.tracks[i].positions.last().unwrap()).collect();
        let results = match_points(params, &frames[t - 1], &frames[t], &kps, &cfg.mode, None)?;
        let mut next = Vec::with_capacity(live.len());
        let mut corr = Vec::new();
        for (&ti, r) in live.iter().zip(results) {
            if let PointResult::Matched(mut c) = r {
                c.track_id = out.tracks[ti].id;
                out.tracks[ti].positions.push(c.dst);
                corr.push(c);
                next.push(ti);
            }
        }
        let positions: Vec<Keypoint> = next.iter().map(|&i| *out.tracks[i].positions.last().unwrap()).collect();
        for k in replenish(&frames[t], cfg, &positions, cfg.budget.saturating_sub(next.len())) {
            next.push(out.tracks.len());
            out.tracks.push(TrackRecord {
                id: out.tracks.len() as i64,
                start: t,
                positions: vec![k],
            });
        }
        live = next;
        out.live_counts.push(live.len());
        out.per_frame.push(corr);
    }
    Ok(out)
}

pub const TSV_HEADER: &str = "x_a\ty_a\tx_b\ty_b\tconfidence\ttrack_id";

pub fn format_tsv(corr: &[Correspondence]) -> String {
    let mut s = String::with_capacity(48 * (corr.len() + 1));
    s.push_str(TSV_HEADER);
    s.push('\n');
    for c in corr {
        let _ = writeln!(
            s,
            "{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.6}\t{}",
            c.src.x, c.src.y, c.dst.x, c.dst.y, c.confidence, c.track_id
        );
    }
    s
}

pub fn write_tsv(corr: &[Correspondence], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_tsv(corr)).map_err(|e| Error::io(path, e))
}

pub fn parse_tsv(text: &str) -> Result<Vec<Correspondence>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(TSV_HEADER) {
        return Err(Error::Format("missing correspondence header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 6 {
                return Err(Error::Format(format!("expected 6 fields: `{l}`")));
            }
            let num = |s: &str| s.parse::<f32>().map_err(|_| Error::Format(format!("bad number `{s}`")));
            Ok(Correspondence {
                src: Keypoint::new(num(f[0])?, num(f[1])?),
                dst: Keypoint::new(num(f[2])?, num(f[3])?),
                confidence: num(f[4])?,
                track_id: f[5].parse().map_err(|_| Error::Format(format!("bad track id `{}`", f[5])))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn texture(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y| {
            let (x, y) = (x as f32, y as f32);
            0.5 + 0.25 * (0.37 * x + 0.11 * y).sin() + 0.25 * (0.23 * y - 0.17 * x).cos() * (0.05 * x).sin()
        })
    }

    #[test]
    fn prior_outside_is_counted() {
        let p = init_params(&ArchSpec::default(), &mut ChaCha8Rng::seed_from_u64(1));
        let img = texture(96, 96);
        let kps = [Keypoint::new(48.0, 48.0), Keypoint::new(40.0, 40.0)];
        let prior = [Keypoint::new(48.0, 48.0), Keypoint::new(500.0, 40.0)];
        let out = track_single(&p, &img, &img, &kps, 32, Some(&prior)).unwrap();
        assert_eq!(out.border_skipped, 1);
        assert_eq!(out.correspondences.len() + out.low_confidence, 1);
    }

    #[test]
    fn degenerate_pyramid_matches_single() {
        let p = init_params(&ArchSpec::default(), &mut ChaCha8Rng::seed_from_u64(2));
        let a = texture(128, 96);
        let b = crate::imgproc::warp_homography(&a, &crate::imgproc::Homography::translation(2.0, 1.0)).unwrap();
        let kps = [Keypoint::new(50.0, 40.0), Keypoint::new(70.3, 51.6)];
        let cfg = PyramidConfig {
            level1_side: 32,
            ..PyramidConfig::default()
        };
        let s = match_points(&p, &a, &b, &kps, &MatchMode::single(32), None).unwrap();
        let q = match_points(&p, &a, &b, &kps, &MatchMode::Pyramid(cfg), None).unwrap();
        assert_eq!(s, q);
    }

    #[test]
    fn schedule_and_validation() {
        assert_eq!(PyramidConfig::level1_for_height(480), 32);
        assert_eq!(PyramidConfig::level1_for_height(720), 64);
        assert_eq!(PyramidConfig::level1_for_height(1080), 128);
        assert_eq!(PyramidConfig::level1_for_height(1440), 256);
        let bad = PyramidConfig {
            level1_side: 48,
            ..PyramidConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn pyramid_cost_is_two_small_passes() {
        let arch = ArchSpec::default();
        let c32 = count_flops(&arch, 32).unwrap().total();
        for h in [480, 720, 1080, 1440] {
            let m = MatchMode::Pyramid(PyramidConfig::for_resolution(h));
            assert_eq!(m.flops_per_point(&arch).unwrap(), 2 * c32);
        }
    }

    #[test]
    fn tsv_round_trip() {
        let c = Correspondence {
            src: Keypoint::new(1.5, 2.25),
            dst: Keypoint::new(3.0, 4.125),
            confidence: 0.5,
            track_id: -1,
        };
        let text = format_tsv(&[c]);
        assert!(text.starts_with("x_a\ty_a\tx_b\ty_b\tconfidence\ttrack_id\n"));
        assert_eq!(parse_tsv(&text).unwrap(), vec![c]);
    }

    #[test]
    fn stream_respects_budget() {
        let p = init_params(&ArchSpec::default(), &mut ChaCha8Rng::seed_from_u64(3));
        let frames: Vec<Image> = (0..3).map(|_| texture(96, 96)).collect();
        let cfg = StreamConfig {
            budget: 5,
            ..StreamConfig::default()
        };
        let out = track_stream(&p, &frames, &cfg).unwrap();
        assert!(out.live_counts.iter().all(|&n| n <= 5));
        assert_eq!(out.per_frame.len(), 2);
    }
}
