//! Training items assembled from image pairs and clips.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::flowlab::{lk_track, FlowConfig};
use crate::imgproc::{detect_keypoints, DetectConfig, Homography, Image, Keypoint, DETECTION_MARGIN};
use crate::patches::{build_sequence_groups, extract_patch, jittered_patches, Patch, SequenceConfig};

/// One correspondence; ground truth is each patch's `kp_local`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairItem {
    pub a: Patch,
    pub b: Patch,
}

/// One chain through a clip window plus the jittered sets of its first two
/// frames.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceItem {
    pub frames: Vec<Patch>,
    pub jitter_a: Vec<Patch>,
    pub jitter_b: Vec<Patch>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainItem {
    Pair(PairItem),
    Sequence(SequenceItem),
}

/// Where pair ground truth comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelSource {
    /// Forward-backward Lucas–Kanade pseudo-labels.
    Lk,
    /// Projection through the known homography.
    Homography,
}

impl LabelSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lk" => Ok(Self::Lk),
            "homography" | "gt" => Ok(Self::Homography),
            o => Err(Error::Config(format!("unknown label source `{o}`"))),
        }
    }
}

/// An image pair with an optional ground-truth homography `A → B`.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub a: Image,
    pub b: Image,
    pub h: Option<Homography>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairDataConfig {
    pub patch_size: usize,
    pub detect: DetectConfig,
    pub flow: FlowConfig,
    pub labels: LabelSource,
    /// Cap on correspondences taken from one pair.
    pub max_per_pair: usize,
}

impl Default for PairDataConfig {
    fn default() -> Self {
        Self {
            patch_size: 64,
            detect: DetectConfig::default(),
            flow: FlowConfig::default(),
            labels: LabelSource::Lk,
            max_per_pair: usize::MAX,
        }
    }
}

/// Correspondences of one pair: LK pseudo-labels or homography projections,
/// restricted to points inside the second image with the detection margin.
pub fn pair_correspondences(pair: &ImagePair, cfg: &PairDataConfig) -> Result<Vec<(Keypoint, Keypoint)>> {
    let kps = detect_keypoints(&pair.a, &cfg.detect);
    let m = DETECTION_MARGIN as f32;
    let (w, h) = (pair.b.width() as f32, pair.b.height() as f32);
    let inside = |k: &Keypoint| k.x >= m && k.y >= m && k.x <= w - 1.0 - m && k.y <= h - 1.0 - m;
    let out = match cfg.labels {
        LabelSource::Lk => lk_track(&pair.a, &pair.b, &kps, &cfg.flow)?
            .into_iter()
            .filter(|t| t.valid)
            .map(|t| (t.src, t.dst))
            .collect::<Vec<_>>(),
        LabelSource::Homography => {
            let hm = pair
                .h
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("homography labels need a homography".into()))?;
            kps.iter()
                .map(|k| {
                    let (x, y) = hm.apply(k.x as f64, k.y as f64);
                    (*k, Keypoint::new(x as f32, y as f32))
                })
                .filter(|(_, b)| inside(b))
                .collect()
        }
    };
    Ok(out.into_iter().filter(|(_, b)| inside(b)).take(cfg.max_per_pair).collect())
}

/// Patch pairs around every usable correspondence, shuffled with `rng`.
pub fn build_pair_dataset<R: Rng>(pairs: &[ImagePair], cfg: &PairDataConfig, rng: &mut R) -> Result<Vec<PairItem>> {
    let mut items = Vec::new();
    for pair in pairs {
        for (a, b) in pair_correspondences(pair, cfg)? {
            let (Ok(pa), Ok(pb)) = (
                extract_patch(&pair.a, &a, cfg.patch_size),
                extract_patch(&pair.b, &b, cfg.patch_size),
            ) else {
                continue;
            };
            items.push(PairItem { a: pa, b: pb });
        }
    }
    if items.is_empty() {
        return Err(Error::EmptyInput("no valid correspondences for pair training".into()));
    }
    items.shuffle(rng);
    Ok(items)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataConfig {
    pub sequence: SequenceConfig,
    /// Jittered patches per side (`m = n`).
    pub jitter_count: usize,
    /// Jitter radius; `None` means a quarter of the patch side.
    pub jitter_offset: Option<usize>,
    /// Frames kept per chain (from its start).
    pub max_frames: usize,
}

impl Default for SequenceDataConfig {
    fn default() -> Self {
        Self {
            sequence: SequenceConfig::default(),
            jitter_count: 2,
            jitter_offset: None,
            max_frames: usize::MAX,
        }
    }
}

/// One item per retained chain of every clip window, shuffled with `rng`.
pub fn build_sequence_dataset<R: Rng>(clips: &[Vec<Image>], cfg: &SequenceDataConfig, rng: &mut R) -> Result<Vec<SequenceItem>> {
    let size = cfg.sequence.patch_size;
    let offset = cfg.jitter_offset.unwrap_or(size / 4);
    let mut items = Vec::new();
    for clip in clips {
        for group in build_sequence_groups(clip, &cfg.sequence)? {
            for chain in &group.chains {
                let keep = chain.len().min(cfg.max_frames);
                if keep < cfg.sequence.min_chain.max(3) {
                    continue;
                }
                let (Ok(ja), Ok(jb)) = (
                    jittered_patches(&group.frames[0], &chain.points[0], size, cfg.jitter_count, offset, rng),
                    jittered_patches(&group.frames[1], &chain.points[1], size, cfg.jitter_count, offset, rng),
                ) else {
                    continue;
                };
                items.push(SequenceItem {
                    frames: chain.patches[..keep].to_vec(),
                    jitter_a: ja,
                    jitter_b: jb,
                });
            }
        }
    }
    if items.is_empty() {
        return Err(Error::EmptyInput("no chains survive for sequence training".into()));
    }
    items.shuffle(rng);
    Ok(items)
}
