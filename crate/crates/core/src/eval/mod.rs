//! Synthetic data, MMA evaluation and benchmarking.

pub mod bench;
pub mod hpatches;
pub mod mma;
pub mod synth;

use serde::Serialize;

pub use bench::{bench, BenchConfig, BenchEntry, BenchMode, BenchReport};
pub use hpatches::{load_hpatches, HPatchesSequence, SequenceKind};
pub use mma::{correct_counts, eval_mma, MmaResult, DEFAULT_THRESHOLDS};
pub use synth::{generate, synth_generate, HomographyFamily, Manifest, Photometric, SynthDataset, SynthSpec, Texture};

use crate::error::{Error, Result};
use crate::imgproc::{detect_keypoints, DetectConfig};
use crate::infer::{track_pair, MatchMode};
use crate::net::ParamSet;
use crate::train::ImagePair;

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub mma: MmaResult,
    pub per_pair: Vec<MmaResult>,
    pub border_skipped: usize,
    pub low_confidence: usize,
}

/// Detects keypoints in each first image, tracks them into the second and
/// scores the matches against the pair's homography.
pub fn evaluate_pairs(
    params: &ParamSet<f32>,
    pairs: &[ImagePair],
    mode: &MatchMode,
    detect: &DetectConfig,
    thresholds: &[f64],
) -> Result<EvalReport> {
    let mut per_pair = Vec::with_capacity(pairs.len());
    let (mut border, mut low) = (0, 0);
    for p in pairs {
        let h = p
            .h
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("evaluation pair without homography".into()))?;
        let kps = detect_keypoints(&p.a, detect);
        let out = track_pair(params, &p.a, &p.b, &kps, mode, None)?;
        border += out.border_skipped;
        low += out.low_confidence;
        per_pair.push(eval_mma(&out.correspondences, h, thresholds)?);
    }
    Ok(EvalReport {
        mma: MmaResult::mean(&per_pair)?,
        per_pair,
        border_skipped: border,
        low_confidence: low,
    })
}
