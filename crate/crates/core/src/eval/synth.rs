//! Seeded synthetic pairs and clips with exact ground truth.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::{encode_pgm, load_image, warp_homography, Homography, Image};
use crate::train::ImagePair;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    /// Multi-octave smoothed lattice noise.
    ValueNoise,
    Checkerboard,
    /// Sum of random Gaussian blobs.
    Blobs,
    /// Value noise blended with blobs.
    Mixed,
}

impl Texture {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "value_noise" | "noise" => Ok(Self::ValueNoise),
            "checkerboard" => Ok(Self::Checkerboard),
            "blobs" => Ok(Self::Blobs),
            "mixed" => Ok(Self::Mixed),
            o => Err(Error::Config(format!("unknown texture `{o}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum HomographyFamily {
    /// Uniform translation with `|t_x|, |t_y| ≤ max`.
    Translation { max: f64 },
    /// Rotation and isotropic scale about the image centre.
    RotationScale { max_angle_deg: f64, max_log_scale: f64 },
    /// Independent corner displacements up to `max_shift` pixels.
    Projective { max_shift: f64 },
    Fixed(Homography),
}

impl HomographyFamily {
    pub fn sample<R: Rng>(&self, w: usize, h: usize, rng: &mut R) -> Result<Homography> {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        match *self {
            Self::Translation { max } => Ok(Homography::translation(
                rng.random_range(-max..=max),
                rng.random_range(-max..=max),
            )),
            Self::RotationScale {
                max_angle_deg,
                max_log_scale,
            } => {
                let a = rng.random_range(-max_angle_deg..=max_angle_deg).to_radians();
                let s = rng.random_range(-max_log_scale..=max_log_scale).exp();
                let (c, si) = (s * a.cos(), s * a.sin());
                Homography::new([
                    [c, -si, cx - c * cx + si * cy],
                    [si, c, cy - si * cx - c * cy],
                    [0.0, 0.0, 1.0],
                ])
            }
            Self::Projective { max_shift } => {
                let src = [(0.0, 0.0), (w as f64 - 1.0, 0.0), (w as f64 - 1.0, h as f64 - 1.0), (0.0, h as f64 - 1.0)];
                let mut dst = src;
                for d in &mut dst {
                    d.0 += rng.random_range(-max_shift..=max_shift);
                    d.1 += rng.random_range(-max_shift..=max_shift);
                }
                homography_from_points(&src, &dst)
            }
            Self::Fixed(h) => Ok(h),
        }
    }
}

/// Exact four-point homography by solving the 8×8 DLT system.
pub fn homography_from_points(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Result<Homography> {
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let ((x, y), (u, v)) = (src[i], dst[i]);
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    for c in 0..8 {
        let p = (c..8)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .unwrap();
        if a[p][c].abs() < 1e-12 {
            return Err(Error::SingularHomography(0.0));
        }
        a.swap(c, p);
        for r in 0..8 {
            if r != c {
                let f = a[r][c] / a[c][c];
                let pivot = a[c];
                for (x, p) in a[r][c..].iter_mut().zip(&pivot[c..]) {
                    *x -= f * p;
                }
            }
        }
    }
    let h: Vec<f64> = (0..8).map(|i| a[i][8] / a[i][i]).collect();
    Homography::new([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])
}

/// Photometric change applied to the second image of a pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Photometric {
    pub gain: (f64, f64),
    pub bias: (f64, f64),
    /// Upper bound of the Gaussian noise sigma.
    pub max_noise: f64,
    /// Probability of a 3×3 box blur.
    pub blur_prob: f64,
}

impl Default for Photometric {
    fn default() -> Self {
        Self {
            gain: (0.7, 1.3),
            bias: (-0.1, 0.1),
            max_noise: 0.02,
            blur_prob: 0.25,
        }
    }
}

impl Photometric {
    pub fn none() -> Self {
        Self {
            gain: (1.0, 1.0),
            bias: (0.0, 0.0),
            max_noise: 0.0,
            blur_prob: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::none()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gain.0 >= 0.7 && self.gain.1 <= 1.3 && self.gain.0 <= self.gain.1
            && self.bias.0 >= -0.1 && self.bias.1 <= 0.1 && self.bias.0 <= self.bias.1
            && (0.0..=0.02).contains(&self.max_noise)
            && (0.0..=1.0).contains(&self.blur_prob);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("photometric ranges exceed gain [0.7,1.3], bias [-0.1,0.1], noise 0.02".into()))
        }
    }

    pub fn apply<R: Rng>(&self, img: &Image, rng: &mut R) -> Image {
        if self.is_identity() {
            return img.clone();
        }
        let gain = rng.random_range(self.gain.0..=self.gain.1) as f32;
        let bias = rng.random_range(self.bias.0..=self.bias.1) as f32;
        let sigma = rng.random_range(0.0..=self.max_noise) as f32;
        let blur = rng.random_bool(self.blur_prob);
        let src = if blur { box_blur3(img) } else { img.clone() };
        let mut out = src;
        for v in out.data_mut() {
            let n = sigma * rng.sample::<f64, _>(StandardNormal) as f32;
            *v = (gain * *v + bias + n).clamp(0.0, 1.0);
        }
        out
    }
}

fn box_blur3(img: &Image) -> Image {
    let (w, h) = (img.width() as i64, img.height() as i64);
    Image::from_fn(img.width(), img.height(), |x, y| {
        let mut s = 0.0;
        for dy in -1..=1 {
            for dx in -1..=1 {
                let xx = (x as i64 + dx).clamp(0, w - 1) as usize;
                let yy = (y as i64 + dy).clamp(0, h - 1) as usize;
                s += img.get(xx, yy);
            }
        }
        s / 9.0
    })
}

fn smooth(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise<R: Rng>(w: usize, h: usize, rng: &mut R) -> Vec<f32> {
    let mut acc = vec![0f32; w * h];
    let mut amp = 1.0f32;
    for cell in [32usize, 16, 8, 4] {
        let (gw, gh) = (w / cell + 2, h / cell + 2);
        let lat: Vec<f32> = (0..gw * gh).map(|_| rng.random::<f32>()).collect();
        for y in 0..h {
            let fy = y as f32 / cell as f32;
            let (iy, ty) = (fy as usize, smooth(fy.fract()));
            for x in 0..w {
                let fx = x as f32 / cell as f32;
                let (ix, tx) = (fx as usize, smooth(fx.fract()));
                let l = |i: usize, j: usize| lat[j * gw + i];
                let top = l(ix, iy) * (1.0 - tx) + l(ix + 1, iy) * tx;
                let bot = l(ix, iy + 1) * (1.0 - tx) + l(ix + 1, iy + 1) * tx;
                acc[y * w + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
        amp *= 0.6;
    }
    acc
}

fn blobs<R: Rng>(w: usize, h: usize, rng: &mut R) -> Vec<f32> {
    let n = (w * h / 400).max(4);
    let mut acc = vec![0f32; w * h];
    for _ in 0..n {
        let (cx, cy) = (rng.random_range(0.0..w as f32), rng.random_range(0.0..h as f32));
        let s = rng.random_range(2.0f32..7.0);
        let a = rng.random_range(-1.0f32..1.0);
        let r = (3.0 * s).ceil() as i64;
        let inv = 1.0 / (2.0 * s * s);
        for y in (cy as i64 - r).max(0)..(cy as i64 + r + 1).min(h as i64) {
            for x in (cx as i64 - r).max(0)..(cx as i64 + r + 1).min(w as i64) {
                let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                acc[y as usize * w + x as usize] += a * (-d2 * inv).exp();
            }
        }
    }
    acc
}

fn normalize(mut v: Vec<f32>) -> Vec<f32> {
    let lo = v.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let s = if hi > lo { 0.9 / (hi - lo) } else { 0.0 };
    for x in &mut v {
        *x = 0.05 + (*x - lo) * s;
    }
    v
}

/// Renders a texture in `[0.05, 0.95]`.
pub fn render_texture<R: Rng>(kind: Texture, w: usize, h: usize, rng: &mut R) -> Result<Image> {
    let data = match kind {
        Texture::ValueNoise => normalize(value_noise(w, h, rng)),
        Texture::Blobs => normalize(blobs(w, h, rng)),
        Texture::Mixed => {
            let a = normalize(value_noise(w, h, rng));
            let b = normalize(blobs(w, h, rng));
            normalize(a.iter().zip(&b).map(|(x, y)| 0.6 * x + 0.4 * y).collect())
        }
        Texture::Checkerboard => {
            let cell = rng.random_range(8..=16usize);
            let (ox, oy) = (rng.random_range(0..cell), rng.random_range(0..cell));
            (0..w * h)
                .map(|i| {
                    let (x, y) = (i % w + ox, i / w + oy);
                    if (x / cell + y / cell) % 2 == 0 { 0.2 } else { 0.8 }
                })
                .collect()
        }
    };
    Image::new(w, h, data)
}

/// Rounds through the 8-bit representation stored on disk.
pub fn quantize(img: &Image) -> Image {
    Image::from_bytes(img.width(), img.height(), &img.to_bytes()).expect("same dimensions")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub texture: Texture,
    pub width: usize,
    pub height: usize,
    pub pairs: usize,
    pub family: HomographyFamily,
    pub photometric: Photometric,
    pub clips: usize,
    pub clip_len: usize,
    /// Maximum per-frame translation of a clip, pixels.
    pub clip_speed: f64,
    /// Noise sigma added to every clip frame.
    pub clip_noise: f64,
    /// Pairs are cut from a canvas this much larger on every side, so the
    /// second image has no empty border; 0 warps the first image directly.
    pub pad: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            texture: Texture::Mixed,
            width: 160,
            height: 120,
            pairs: 20,
            family: HomographyFamily::Translation { max: 8.0 },
            photometric: Photometric::default(),
            clips: 0,
            clip_len: 10,
            clip_speed: 2.0,
            clip_noise: 0.0,
            pad: 16,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        self.photometric.validate()?;
        if self.width < 64 || self.height < 64 {
            return Err(Error::Config("synthetic images must be at least 64x64".into()));
        }
        if self.clips > 0 && self.clip_len < 2 {
            return Err(Error::Config("clip_len must be at least 2".into()));
        }
        if !(0.0..=0.02).contains(&self.clip_noise) {
            return Err(Error::Config("clip_noise must lie in [0, 0.02]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthPair {
    pub a: Image,
    pub b: Image,
    pub h: Homography,
}

#[derive(Clone, Debug)]
pub struct SynthClip {
    pub frames: Vec<Image>,
    /// Displacement of scene content in frame `i` relative to frame 0.
    pub motion: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub pairs: Vec<SynthPair>,
    pub clips: Vec<SynthClip>,
}

impl SynthDataset {
    pub fn image_pairs(&self) -> Vec<ImagePair> {
        self.pairs
            .iter()
            .map(|p| ImagePair {
                a: p.a.clone(),
                b: p.b.clone(),
                h: Some(p.h),
            })
            .collect()
    }

    pub fn clip_frames(&self) -> Vec<Vec<Image>> {
        self.clips.iter().map(|c| c.frames.clone()).collect()
    }
}

/// Generates the dataset in memory; images are already 8-bit quantised, so
/// they equal what [`write_dataset`] stores.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let mut pairs = Vec::with_capacity(spec.pairs);
    for _ in 0..spec.pairs {
        let pd = spec.pad;
        let canvas = quantize(&render_texture(spec.texture, w + 2 * pd, h + 2 * pd, &mut rng)?);
        let hm = spec.family.sample(w, h, &mut rng)?;
        let (a, warped) = if pd == 0 {
            let warped = warp_homography(&canvas, &hm)?;
            (canvas, warped)
        } else {
            // conjugate by the crop offset so `hm` maps crop A onto crop B
            let t = Homography::translation(pd as f64, pd as f64);
            let hc = t.compose(&hm)?.compose(&t.inverse()?)?;
            let full = warp_homography(&canvas, &hc)?;
            (canvas.crop(pd, pd, w, h)?, full.crop(pd, pd, w, h)?)
        };
        let b = quantize(&spec.photometric.apply(&warped, &mut rng));
        pairs.push(SynthPair { a, b, h: hm });
    }
    let mut clips = Vec::with_capacity(spec.clips);
    for _ in 0..spec.clips {
        let ang = rng.random_range(0.0..std::f64::consts::TAU);
        let speed = rng.random_range(0.0..=spec.clip_speed);
        let v = (speed * ang.cos(), speed * ang.sin());
        let margin = (spec.clip_speed * spec.clip_len as f64).ceil() as usize + 2;
        let canvas = render_texture(spec.texture, w + 2 * margin, h + 2 * margin, &mut rng)?;
        let mut frames = Vec::with_capacity(spec.clip_len);
        let mut motion = Vec::with_capacity(spec.clip_len);
        for i in 0..spec.clip_len {
            let d = (v.0 * i as f64, v.1 * i as f64);
            let sigma = spec.clip_noise as f32;
            let mut f = Image::from_fn(w, h, |x, y| {
                let sx = x as f64 - d.0 + margin as f64;
                let sy = y as f64 - d.1 + margin as f64;
                canvas.sample_clamped(sx as f32, sy as f32)
            });
            if sigma > 0.0 {
                for p in f.data_mut() {
                    *p = (*p + sigma * rng.sample::<f64, _>(StandardNormal) as f32).clamp(0.0, 1.0);
                }
            }
            frames.push(quantize(&f));
            motion.push(d);
        }
        clips.push(SynthClip { frames, motion });
    }
    Ok(SynthDataset { pairs, clips })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub img_a: String,
    pub img_b: String,
    #[serde(rename = "H_file")]
    pub h_file: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub frames: Vec<String>,
    #[serde(default)]
    pub motion: Vec<[f64; 2]>,
}

/// Dataset listing; entry paths are relative to the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub pairs: Vec<PairEntry>,
    #[serde(default)]
    pub clips: Vec<ClipEntry>,
    #[serde(skip)]
    pub base: PathBuf,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        m.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises") + "\n"
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base.join(rel)
    }

    pub fn load_pairs(&self) -> Result<Vec<ImagePair>> {
        self.pairs
            .iter()
            .map(|e| {
                Ok(ImagePair {
                    a: load_image(self.resolve(&e.img_a))?,
                    b: load_image(self.resolve(&e.img_b))?,
                    h: e.h_file.as_ref().map(|f| Homography::load(self.resolve(f))).transpose()?,
                })
            })
            .collect()
    }

    pub fn load_clips(&self) -> Result<Vec<Vec<Image>>> {
        self.clips
            .iter()
            .map(|c| c.frames.iter().map(|f| load_image(self.resolve(f))).collect())
            .collect()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes PGM images, homography text files and `manifest.json`.
pub fn write_dataset(ds: &SynthDataset, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut m = Manifest {
        base: out.to_path_buf(),
        ..Manifest::default()
    };
    for (i, p) in ds.pairs.iter().enumerate() {
        let (a, b, hf) = (format!("pair_{i:04}_a.pgm"), format!("pair_{i:04}_b.pgm"), format!("pair_{i:04}_H.txt"));
        write_file(&out.join(&a), &encode_pgm(&p.a))?;
        write_file(&out.join(&b), &encode_pgm(&p.b))?;
        p.h.save(out.join(&hf))?;
        m.pairs.push(PairEntry {
            img_a: a,
            img_b: b,
            h_file: Some(hf),
        });
    }
    for (i, c) in ds.clips.iter().enumerate() {
        let mut frames = Vec::new();
        for (j, f) in c.frames.iter().enumerate() {
            let name = format!("clip_{i:03}_{j:03}.pgm");
            write_file(&out.join(&name), &encode_pgm(f))?;
            frames.push(name);
        }
        m.clips.push(ClipEntry {
            frames,
            motion: c.motion.iter().map(|&(x, y)| [x, y]).collect(),
        });
    }
    write_file(&out.join("manifest.json"), m.to_json().as_bytes())?;
    Ok(m)
}

/// [`generate`] followed by [`write_dataset`].
pub fn synth_generate(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    write_dataset(&generate(spec)?, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_point_solver_recovers_homography() {
        let h = Homography::new([[1.1, 0.05, 3.0], [-0.02, 0.95, -2.0], [1e-4, -2e-4, 1.0]]).unwrap();
        let src = [(0.0, 0.0), (100.0, 0.0), (100.0, 80.0), (0.0, 80.0)];
        let dst = src.map(|(x, y)| h.apply(x, y));
        let e = homography_from_points(&src, &dst).unwrap();
        for (a, b) in h.matrix().iter().flatten().zip(e.matrix().iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn photometric_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = render_texture(Texture::ValueNoise, 64, 64, &mut rng).unwrap();
        let out = Photometric::default().apply(&img, &mut rng);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(Photometric {
            gain: (0.5, 1.0),
            ..Photometric::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn clip_motion_is_constant_velocity() {
        let spec = SynthSpec {
            pairs: 0,
            clips: 1,
            clip_len: 4,
            ..SynthSpec::default()
        };
        let ds = generate(&spec).unwrap();
        let m = &ds.clips[0].motion;
        let d = (m[1].0 - m[0].0, m[1].1 - m[0].1);
        assert_eq!(m[0], (0.0, 0.0));
        assert!(d.0.hypot(d.1) <= 2.0 + 1e-12);
        assert!(((m[3].0 - 3.0 * d.0).abs()) < 1e-9);
    }
}
