//! Fixed-size patches around correspondences, jittered patch sets and
//! multi-frame sequence groups.

use rand::Rng;

use crate::error::{Error, Result};
use crate::flowlab::{lk_track_pyramids, FlowConfig, FlowPyramid, FlowTrack};
use crate::imgproc::{detect_keypoints, DetectConfig, Image, Keypoint};

/// Window of the source image with integer origin and the keypoint position
/// in local (patch) coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub pixels: Image,
    pub origin_x: usize,
    pub origin_y: usize,
    pub kp_local_x: f32,
    pub kp_local_y: f32,
}

impl Patch {
    pub fn side(&self) -> usize {
        self.pixels.width()
    }

    /// Keypoint position mapped back to source-image coordinates.
    pub fn keypoint_in_image(&self) -> (f32, f32) {
        (
            self.origin_x as f32 + self.kp_local_x,
            self.origin_y as f32 + self.kp_local_y,
        )
    }

    pub fn to_image(&self, x: f32, y: f32) -> (f32, f32) {
        (self.origin_x as f32 + x, self.origin_y as f32 + y)
    }
}

#[inline]
fn round_half_up(v: f32) -> i64 {
    (v + 0.5).floor() as i64
}

/// Origin of the `size`-sided patch centred on `kp`.
pub fn centered_origin(kp: &Keypoint, size: usize) -> (i64, i64) {
    let half = (size / 2) as i64;
    (round_half_up(kp.x) - half, round_half_up(kp.y) - half)
}

fn crop_at(img: &Image, kp: &Keypoint, ox: i64, oy: i64, size: usize) -> Result<Patch> {
    if !kp.x.is_finite()
        || !kp.y.is_finite()
        || ox < 0
        || oy < 0
        || ox as usize + size > img.width()
        || oy as usize + size > img.height()
    {
        return Err(Error::BorderViolation {
            x: kp.x,
            y: kp.y,
            size,
        });
    }
    let (ox, oy) = (ox as usize, oy as usize);
    Ok(Patch {
        pixels: img.crop(ox, oy, size, size)?,
        origin_x: ox,
        origin_y: oy,
        kp_local_x: kp.x - ox as f32,
        kp_local_y: kp.y - oy as f32,
    })
}

/// Crops the `size×size` patch whose origin is `round(kp) − size/2`.
pub fn extract_patch(img: &Image, kp: &Keypoint, size: usize) -> Result<Patch> {
    if size == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    let (ox, oy) = centered_origin(kp, size);
    crop_at(img, kp, ox, oy, size)
}

/// `count` patches whose origins are the centred origin shifted by i.i.d.
/// integer offsets uniform in `[-max_offset, max_offset]²`.
pub fn jittered_patches<R: Rng>(
    img: &Image,
    kp: &Keypoint,
    size: usize,
    count: usize,
    max_offset: usize,
    rng: &mut R,
) -> Result<Vec<Patch>> {
    let (cx, cy) = centered_origin(kp, size);
    let m = max_offset as i64;
    // the whole jitter range must stay inside the image
    if cx - m < 0
        || cy - m < 0
        || cx + m + size as i64 > img.width() as i64
        || cy + m + size as i64 > img.height() as i64
    {
        return Err(Error::BorderViolation {
            x: kp.x,
            y: kp.y,
            size: size + 2 * max_offset,
        });
    }
    (0..count)
        .map(|_| {
            let dx = rng.random_range(-m..=m);
            let dy = rng.random_range(-m..=m);
            crop_at(img, kp, cx + dx, cy + dy, size)
        })
        .collect()
}

/// One keypoint continuously tracked from the first frame of a group.
#[derive(Clone, Debug)]
pub struct Chain {
    /// Position in each covered frame, starting at frame 0 of the group.
    pub points: Vec<Keypoint>,
    /// LK tracks linking frame `k` to `k + 1`.
    pub tracks: Vec<FlowTrack>,
    /// Patch centred on the chain position in each covered frame.
    pub patches: Vec<Patch>,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct SequenceGroup {
    pub frames: Vec<Image>,
    pub chains: Vec<Chain>,
    /// Index of the group's first frame in the source sequence.
    pub start: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceConfig {
    pub window: usize,
    pub min_chain: usize,
    pub patch_size: usize,
    pub detect: DetectConfig,
    pub flow: FlowConfig,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            window: 10,
            min_chain: 3,
            patch_size: 64,
            detect: DetectConfig::default(),
            flow: FlowConfig::default(),
        }
    }
}

/// Splits `frames` into non-overlapping windows, chains FAST points from each
/// window's first frame through LK, and keeps chains covering at least
/// `min_chain` frames.
pub fn build_sequence_groups(frames: &[Image], cfg: &SequenceConfig) -> Result<Vec<SequenceGroup>> {
    if cfg.window < 2 {
        return Err(Error::InvalidArgument("sequence window must be at least 2".into()));
    }
    if frames.len() < cfg.window {
        return Err(Error::EmptyInput(format!(
            "{} frames for a window of {}",
            frames.len(),
            cfg.window
        )));
    }
    let mut groups = Vec::new();
    for start in (0..=frames.len() - cfg.window).step_by(cfg.window) {
        let win = &frames[start..start + cfg.window];
        let pyramids = win
            .iter()
            .map(|f| FlowPyramid::for_config(f, &cfg.flow))
            .collect::<Result<Vec<_>>>()?;
        let seeds = detect_keypoints(&win[0], &cfg.detect);
        let mut chains: Vec<Chain> = Vec::new();
        let mut live: Vec<usize> = Vec::new();
        for kp in seeds {
            if let Ok(p) = extract_patch(&win[0], &kp, cfg.patch_size) {
                live.push(chains.len());
                chains.push(Chain {
                    points: vec![kp],
                    tracks: Vec::new(),
                    patches: vec![p],
                });
            }
        }
        for k in 1..win.len() {
            if live.is_empty() {
                break;
            }
            let pts: Vec<Keypoint> = live.iter().map(|&i| *chains[i].points.last().unwrap()).collect();
            let tracks = lk_track_pyramids(&pyramids[k - 1], &pyramids[k], &pts, &cfg.flow)?;
            let mut next_live = Vec::with_capacity(live.len());
            for (&ci, t) in live.iter().zip(tracks) {
                if !t.valid {
                    continue;
                }
                let Ok(patch) = extract_patch(&win[k], &t.dst, cfg.patch_size) else {
                    continue;
                };
                let c = &mut chains[ci];
                c.points.push(t.dst);
                c.tracks.push(t);
                c.patches.push(patch);
                next_live.push(ci);
            }
            live = next_live;
        }
        chains.retain(|c| c.len() >= cfg.min_chain);
        groups.push(SequenceGroup {
            frames: win.to_vec(),
            chains,
            start,
        });
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y| ((x * 3 + y * 5) % 251) as f32 / 251.0)
    }

    #[test]
    fn centering_arithmetic() {
        let img = ramp(200, 200);
        let p = extract_patch(&img, &Keypoint::new(100.0, 100.0), 64).unwrap();
        assert_eq!((p.origin_x, p.origin_y), (68, 68));
        assert_eq!((p.kp_local_x, p.kp_local_y), (32.0, 32.0));
        let kp = Keypoint::new(100.3, 100.7);
        let p = extract_patch(&img, &kp, 64).unwrap();
        assert_eq!((p.origin_x, p.origin_y), (68, 69));
        assert!((p.kp_local_x - 32.3).abs() < 1e-5 && (p.kp_local_y - 31.7).abs() < 1e-5);
        assert_eq!(p.keypoint_in_image(), (kp.x, kp.y));
        // round-half-up on exact halves
        let p = extract_patch(&img, &Keypoint::new(100.5, 99.5), 64).unwrap();
        assert_eq!((p.origin_x, p.origin_y), (69, 68));
    }

    #[test]
    fn border_is_rejected() {
        let img = ramp(200, 200);
        assert!(matches!(
            extract_patch(&img, &Keypoint::new(10.0, 100.0), 64),
            Err(Error::BorderViolation { .. })
        ));
        assert!(extract_patch(&img, &Keypoint::new(100.0, 190.0), 64).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(jittered_patches(&img, &Keypoint::new(36.0, 100.0), 64, 2, 8, &mut rng).is_err());
    }

    #[test]
    fn degenerate_jitter_matches_extract() {
        let img = ramp(200, 200);
        let kp = Keypoint::new(90.4, 77.6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let j = jittered_patches(&img, &kp, 32, 1, 0, &mut rng).unwrap();
        assert_eq!(j[0], extract_patch(&img, &kp, 32).unwrap());
    }

    #[test]
    fn jitter_is_deterministic_and_consistent() {
        let img = ramp(200, 200);
        let kp = Keypoint::new(100.25, 99.75);
        let a = jittered_patches(&img, &kp, 64, 4, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = jittered_patches(&img, &kp, 64, 4, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        for p in &a {
            assert_eq!(p.keypoint_in_image(), (kp.x, kp.y));
            let (cx, cy) = centered_origin(&kp, 64);
            assert!((p.origin_x as i64 - cx).abs() <= 8 && (p.origin_y as i64 - cy).abs() <= 8);
            assert_eq!(p.pixels, img.crop(p.origin_x, p.origin_y, 64, 64).unwrap());
        }
    }

    #[test]
    fn sequence_needs_enough_frames() {
        let frames = vec![ramp(64, 64); 3];
        let cfg = SequenceConfig::default();
        assert!(matches!(build_sequence_groups(&frames, &cfg), Err(Error::EmptyInput(_))));
    }
}
