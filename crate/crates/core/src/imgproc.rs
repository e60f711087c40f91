//! Grayscale rasters and the classical image operations the tracker is built
//! on: PGM/PNG loading, FAST-9 corners, keypoint NMS, bilinear sampling,
//! homography warping and area downsampling.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::real::Real;

/// Smallest width/height accepted for a pipeline image.
pub const MIN_IMAGE_SIDE: usize = 16;

/// Margin (in pixels) that FAST detections keep from every border so that
/// each keypoint admits a 32×32 patch.
pub const DETECTION_MARGIN: usize = 16;

/// Row-major grayscale raster with intensities in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Image({}x{})", self.width, self.height)
    }
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "empty raster {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::SizeMismatch(format!(
                "raster {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[f32] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    /// Copies the `w×h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::OutOfBounds {
                x: (x0 + w) as f64,
                y: (y0 + h) as f64,
                width: self.width,
                height: self.height,
            });
        }
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.row(y)[x0..x0 + w]);
        }
        Image::new(w, h, data)
    }

    /// Bilinear sample; errors outside `[0, w-1] × [0, h-1]`.
    pub fn sample(&self, x: f32, y: f32) -> Result<f32> {
        bilinear(&self.data, self.width, self.height, x, y)
    }

    /// Bilinear sample with coordinates clamped into the raster.
    #[inline]
    pub fn sample_clamped(&self, x: f32, y: f32) -> f32 {
        let xc = x.clamp(0.0, (self.width - 1) as f32);
        let yc = y.clamp(0.0, (self.height - 1) as f32);
        bilinear_unchecked(&self.data, self.width, self.height, xc, yc)
    }

    pub fn ensure_pipeline_size(&self) -> Result<()> {
        if self.width < MIN_IMAGE_SIDE || self.height < MIN_IMAGE_SIDE {
            return Err(Error::ImageTooSmall {
                width: self.width,
                height: self.height,
                min: MIN_IMAGE_SIDE,
            });
        }
        Ok(())
    }

    /// Quantises to 8 bits (round to nearest) for PGM output.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Image> {
        Image::new(
            width,
            height,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }
}

/// Sub-pixel image location with a detector response.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub score: f32,
}

impl Keypoint {
    pub fn new(x: f32, y: f32) -> Self {
        Self { x, y, score: 0.0 }
    }

    pub fn with_score(x: f32, y: f32, score: f32) -> Self {
        Self { x, y, score }
    }

    pub fn distance(&self, other: &Keypoint) -> f32 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Projective 3×3 transform, row-major, normalised so that `h[2][2] == 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        let s = m[2][2];
        if s.abs() < 1e-12 || !s.is_finite() {
            return Err(Error::SingularHomography(s.abs()));
        }
        let mut n = m;
        for row in n.iter_mut() {
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let h = Self { m: n };
        let det = h.det();
        if det.abs() <= 1e-12 || !det.is_finite() {
            return Err(Error::SingularHomography(det.abs()));
        }
        Ok(h)
    }

    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
        }
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<Self> {
        let m = &self.m;
        let det = self.det();
        if det.abs() <= 1e-12 {
            return Err(Error::SingularHomography(det.abs()));
        }
        let inv = [
            [
                (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det,
                (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det,
                (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det,
            ],
            [
                (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det,
                (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det,
                (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det,
            ],
            [
                (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det,
                (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det,
                (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det,
            ],
        ];
        Homography::new(inv)
    }

    pub fn compose(&self, other: &Homography) -> Result<Homography> {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        Homography::new(r)
    }

    /// Maps `(x, y)` through the homography using homogeneous projection.
    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        (
            (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
        )
    }

    /// Parses nine whitespace-separated decimals (HPatches `H_1_2` layout).
    pub fn parse(text: &str) -> Result<Self> {
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::Format(format!("homography value `{t}`: {e}")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != 9 {
            return Err(Error::Format(format!(
                "homography needs 9 values, found {}",
                vals.len()
            )));
        }
        Homography::new([
            [vals[0], vals[1], vals[2]],
            [vals[3], vals[4], vals[5]],
            [vals[6], vals[7], vals[8]],
        ])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Homography::parse(&text)
    }

    /// Three lines of three values; `{:e}`-free shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in &self.m {
            s.push_str(&format!("{} {} {}\n", row[0], row[1], row[2]));
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

// ---------------------------------------------------------------------------
// File I/O

/// Decodes a binary PGM (P5) or PPM (P6, converted to luma), maxval 255.
/// No minimum size is enforced here.
pub fn decode_pgm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let next_token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = next_token(&mut pos)?;
    if magic != "P5" && magic != "P6" {
        return Err(Error::Format(format!("unsupported PGM magic `{magic}`")));
    }
    let parse = |t: String| -> Result<usize> {
        t.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PGM header field `{t}`")))
    };
    let width = parse(next_token(&mut pos)?)?;
    let height = parse(next_token(&mut pos)?)?;
    let maxval = parse(next_token(&mut pos)?)?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let channels = if magic == "P6" { 3 } else { 1 };
    let need = width * height * channels;
    if pos > bytes.len() || bytes.len() - pos < need {
        return Err(Error::Format(format!(
            "PGM raster truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let raster = &bytes[pos..pos + need];
    if channels == 1 {
        return Image::from_bytes(width, height, raster);
    }
    let data = raster
        .chunks_exact(3)
        .map(|p| (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0)
        .collect();
    Image::new(width, height, data)
}

pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(&img.to_bytes());
    out
}

pub fn save_pgm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_pgm(img)).map_err(|e| Error::io(path, e))
}

#[cfg(feature = "png")]
fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("png: image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!(
            "png: only 8-bit images supported, got {:?}",
            info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let buf = &buf[..info.buffer_size()];
    let luma = |px: &[u8]| -> f32 {
        match channels {
            1 | 2 => px[0] as f32 / 255.0,
            _ => {
                (0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32) / 255.0
            }
        }
    };
    let data = buf.chunks_exact(channels).map(luma).collect();
    Image::new(w, h, data)
}

/// Loads an 8-bit PGM (P5), PPM (P6) or, with the `png` feature, an 8-bit PNG.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        decode_pgm(&bytes)?
    } else if bytes.starts_with(b"\x89PNG") {
        #[cfg(feature = "png")]
        {
            decode_png(&bytes)?
        }
        #[cfg(not(feature = "png"))]
        {
            return Err(Error::Format("PNG support not compiled in".into()));
        }
    } else {
        return Err(Error::Format(format!(
            "{}: unsupported image format",
            path.display()
        )));
    };
    img.ensure_pipeline_size()?;
    Ok(img)
}

// ---------------------------------------------------------------------------
// FAST-9

/// Bresenham circle of radius 3, in contiguous order.
pub const FAST_CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

const FAST_ARC: usize = 9;

/// Longest circular run of `flags`, returned as (start, len).
fn longest_run(flags: &[bool; 16]) -> (usize, usize) {
    if flags.iter().all(|&f| f) {
        return (0, 16);
    }
    let (mut best_start, mut best_len) = (0, 0);
    let mut run = 0;
    // walk twice around to catch runs that wrap
    for i in 0..32 {
        if flags[i % 16] {
            run += 1;
            if run > best_len {
                best_len = run;
                best_start = (i + 1 - run) % 16;
            }
        } else {
            run = 0;
        }
    }
    (best_start, best_len.min(16))
}

/// FAST-9 response at an interior pixel: the sum of absolute differences over
/// the qualifying contiguous arc, or `None` when the segment test fails.
pub fn fast_score(img: &Image, x: usize, y: usize, threshold: f32) -> Option<f32> {
    let w = img.width as i32;
    let c = img.get(x, y);
    let mut diff = [0f32; 16];
    for (k, &(dx, dy)) in FAST_CIRCLE.iter().enumerate() {
        let idx = (y as i32 + dy) * w + x as i32 + dx;
        diff[k] = img.data[idx as usize] - c;
    }
    let mut best: Option<f32> = None;
    for sign in [1.0f32, -1.0] {
        let mut flags = [false; 16];
        for k in 0..16 {
            flags[k] = sign * diff[k] > threshold;
        }
        let (start, len) = longest_run(&flags);
        if len >= FAST_ARC {
            let sad: f32 = (0..len).map(|i| diff[(start + i) % 16].abs()).sum();
            best = Some(best.map_or(sad, |b: f32| b.max(sad)));
        }
    }
    best
}

fn score_order(a: &Keypoint, b: &Keypoint) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.y.total_cmp(&b.y))
        .then(a.x.total_cmp(&b.x))
}

/// FAST-9 corners sorted by descending score, at most `max_points`, none
/// within [`DETECTION_MARGIN`] pixels of the border.
pub fn detect_fast(img: &Image, threshold: f32, max_points: usize) -> Vec<Keypoint> {
    let m = DETECTION_MARGIN;
    if img.width < 2 * m + 1 || img.height < 2 * m + 1 {
        return Vec::new();
    }
    let mut pts = Vec::new();
    for y in m..img.height - m {
        for x in m..img.width - m {
            if let Some(score) = fast_score(img, x, y, threshold) {
                pts.push(Keypoint::with_score(x as f32, y as f32, score));
            }
        }
    }
    pts.sort_by(score_order);
    pts.truncate(max_points);
    pts
}

/// Greedy non-maximum suppression: visits points by descending score (ties by
/// lower y, then lower x) and keeps a point only if no kept point lies closer
/// than `radius`.
pub fn nms_keypoints(pts: &[Keypoint], radius: f32) -> Vec<Keypoint> {
    if pts.is_empty() {
        return Vec::new();
    }
    let mut order: Vec<Keypoint> = pts.to_vec();
    order.sort_by(score_order);
    let r2 = radius * radius;
    let cell = radius.max(1.0);
    let (min_x, min_y) = order.iter().fold((f32::MAX, f32::MAX), |(mx, my), p| {
        (mx.min(p.x), my.min(p.y))
    });
    let key = |p: &Keypoint| -> (i64, i64) {
        (
            ((p.x - min_x) / cell).floor() as i64,
            ((p.y - min_y) / cell).floor() as i64,
        )
    };
    let mut grid: std::collections::HashMap<(i64, i64), Vec<usize>> = Default::default();
    let mut kept: Vec<Keypoint> = Vec::new();
    for p in order {
        let (cx, cy) = key(&p);
        let mut suppressed = false;
        'scan: for gy in cy - 1..=cy + 1 {
            for gx in cx - 1..=cx + 1 {
                if let Some(ids) = grid.get(&(gx, gy)) {
                    for &i in ids {
                        let q = &kept[i];
                        let (dx, dy) = (p.x - q.x, p.y - q.y);
                        if dx * dx + dy * dy < r2 {
                            suppressed = true;
                            break 'scan;
                        }
                    }
                }
            }
        }
        if !suppressed {
            grid.entry((cx, cy)).or_default().push(kept.len());
            kept.push(p);
        }
    }
    kept
}

/// Detector settings for the FAST → NMS → truncate pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectConfig {
    pub threshold: f32,
    pub max_points: usize,
    pub nms_radius: f32,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            threshold: 0.05,
            max_points: 200,
            nms_radius: 8.0,
        }
    }
}

/// FAST corners, suppressed with [`nms_keypoints`], best `max_points` kept.
pub fn detect_keypoints(img: &Image, cfg: &DetectConfig) -> Vec<Keypoint> {
    let raw = detect_fast(img, cfg.threshold, usize::MAX);
    let mut kept = nms_keypoints(&raw, cfg.nms_radius);
    kept.truncate(cfg.max_points);
    kept
}

// ---------------------------------------------------------------------------
// Sampling

#[inline]
pub(crate) fn bilinear_unchecked<T: Real>(data: &[T], w: usize, h: usize, x: T, y: T) -> T {
    let x0f = x.floor();
    let y0f = y.floor();
    let x0 = x0f.to_usize().unwrap_or(0).min(w - 1);
    let y0 = y0f.to_usize().unwrap_or(0).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0f;
    let fy = y - y0f;
    let one = T::one();
    let a = data[y0 * w + x0];
    let b = data[y0 * w + x1];
    let c = data[y1 * w + x0];
    let d = data[y1 * w + x1];
    let top = (one - fx) * a + fx * b;
    let bot = (one - fx) * c + fx * d;
    (one - fy) * top + fy * bot
}

/// Bilinear interpolation on a row-major `w×h` grid. Grid coordinates return
/// the stored value exactly.
pub fn bilinear<T: Real>(data: &[T], w: usize, h: usize, x: T, y: T) -> Result<T> {
    let maxx = T::lit((w - 1) as f64);
    let maxy = T::lit((h - 1) as f64);
    if !(x >= T::zero() && x <= maxx && y >= T::zero() && y <= maxy) {
        return Err(Error::OutOfBounds {
            x: x.as_f64(),
            y: y.as_f64(),
            width: w,
            height: h,
        });
    }
    Ok(bilinear_unchecked(data, w, h, x, y))
}

/// Bilinear sample of every channel of a channel-major (`C×H×W`) grid.
pub fn bilinear_channels<T: Real>(
    data: &[T],
    channels: usize,
    w: usize,
    h: usize,
    x: T,
    y: T,
) -> Result<Vec<T>> {
    let plane = w * h;
    (0..channels)
        .map(|c| bilinear(&data[c * plane..(c + 1) * plane], w, h, x, y))
        .collect()
}

/// Inverse warp: output pixel `p` takes the bilinear source value at `H⁻¹·p`,
/// or 0 when that falls outside the source.
pub fn warp_homography(img: &Image, h: &Homography) -> Result<Image> {
    let inv = h.inverse()?;
    let (w, ht) = (img.width, img.height);
    let maxx = (w - 1) as f64;
    let maxy = (ht - 1) as f64;
    let mut out = Image::filled(w, ht, 0.0);
    for y in 0..ht {
        for x in 0..w {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            if sx >= 0.0 && sx <= maxx && sy >= 0.0 && sy <= maxy {
                out.data[y * w + x] = sample_f64(img, sx, sy);
            }
        }
    }
    Ok(out)
}

#[inline]
fn sample_f64(img: &Image, x: f64, y: f64) -> f32 {
    let (w, h) = (img.width, img.height);
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let g = |xx: usize, yy: usize| img.data[yy * w + xx] as f64;
    let top = (1.0 - fx) * g(x0, y0) + fx * g(x1, y0);
    let bot = (1.0 - fx) * g(x0, y1) + fx * g(x1, y1);
    ((1.0 - fy) * top + fy * bot) as f32
}

/// Area-average pooling over `factor×factor` blocks.
pub fn downsample(img: &Image, factor: usize) -> Result<Image> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "downsample factor {factor} is not a power of two"
        )));
    }
    if !img.width.is_multiple_of(factor) || !img.height.is_multiple_of(factor) {
        return Err(Error::NotDivisible {
            width: img.width,
            height: img.height,
            factor,
        });
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let (ow, oh) = (img.width / factor, img.height / factor);
    let norm = 1.0 / (factor * factor) as f32;
    let mut out = vec![0f32; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0f32;
            for y in oy * factor..(oy + 1) * factor {
                let row = &img.row(y)[ox * factor..(ox + 1) * factor];
                acc += row.iter().sum::<f32>();
            }
            out[oy * ow + ox] = acc * norm;
        }
    }
    Image::new(ow, oh, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pgm_decoding_scales_bytes() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 128, 64]);
        let img = decode_pgm(&bytes).unwrap();
        let expect = [0.0, 1.0, 0.50196, 0.25098];
        for (a, b) in img.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn pgm_with_comment_and_truncation() {
        let mut bytes = b"P5 # comment\n3 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3]);
        assert_eq!(decode_pgm(&bytes).unwrap().width(), 3);
        bytes.pop();
        assert!(matches!(decode_pgm(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode_pgm(b"P2\n1 1\n255\n0"), Err(Error::Format(_))));
    }

    #[test]
    fn load_rejects_small_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("small.pgm");
        save_pgm(&Image::filled(8, 8, 0.5), &p).unwrap();
        assert!(matches!(load_image(&p), Err(Error::ImageTooSmall { .. })));
        assert!(matches!(
            load_image(dir.path().join("none.pgm")),
            Err(Error::Io { .. })
        ));
        let q = dir.path().join("junk.bin");
        std::fs::write(&q, b"hello").unwrap();
        assert!(matches!(load_image(&q), Err(Error::Format(_))));
    }

    #[cfg(feature = "png")]
    #[test]
    fn png_rgb_is_converted_to_luma() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        {
            let f = std::fs::File::create(&p).unwrap();
            let mut enc = png::Encoder::new(std::io::BufWriter::new(f), 16, 16);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut wr = enc.write_header().unwrap();
            let data: Vec<u8> = (0..16 * 16).flat_map(|_| [255u8, 0, 0]).collect();
            wr.write_image_data(&data).unwrap();
        }
        let img = load_image(&p).unwrap();
        assert!((img.get(3, 3) - 0.299).abs() < 1e-5);
    }

    #[test]
    fn fast_uniform_is_empty() {
        assert!(detect_fast(&Image::filled(64, 64, 0.3), 0.05, 100).is_empty());
    }

    #[test]
    fn fast_truncates_and_sorts() {
        // isolated 8px blocks on a 16px lattice: four L-corners per block
        let img = Image::from_fn(400, 400, |x, y| ((x % 16 < 8) && (y % 16 < 8)) as u8 as f32);
        let all = detect_fast(&img, 0.1, usize::MAX);
        assert!(all.len() > 100, "{}", all.len());
        let top = detect_fast(&img, 0.1, 10);
        assert_eq!(top.len(), 10);
        for w in top.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn fast_respects_margin() {
        let img = Image::from_fn(80, 80, |x, y| (((x / 5) + (y / 5)) % 2) as f32);
        for kp in detect_fast(&img, 0.1, usize::MAX) {
            assert!(kp.x >= 16.0 && kp.x <= 63.0 && kp.y >= 16.0 && kp.y <= 63.0);
        }
    }

    #[test]
    fn nms_basic_rules() {
        let a = Keypoint::with_score(10.0, 10.0, 2.0);
        let b = Keypoint::with_score(13.0, 10.0, 1.0);
        assert_eq!(nms_keypoints(&[b, a], 4.0), vec![a]);
        let c = Keypoint::with_score(10.0, 12.0, 1.0);
        let d = Keypoint::with_score(10.0, 9.0, 1.0);
        assert_eq!(nms_keypoints(&[c, d], 4.0), vec![d]);
        assert!(nms_keypoints(&[], 4.0).is_empty());
    }

    #[test]
    fn bilinear_grid_and_midpoint() {
        let data = [0.0f64, 0.0, 1.0, 1.0];
        assert_eq!(bilinear(&data, 2, 2, 0.5, 0.5).unwrap(), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grid: Vec<f64> = (0..25).map(|_| rng.random()).collect();
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(
                    bilinear(&grid, 5, 5, x as f64, y as f64).unwrap(),
                    grid[y * 5 + x]
                );
            }
        }
        assert!(bilinear(&grid, 5, 5, 4.01, 0.0).is_err());
        assert!(bilinear(&grid, 5, 5, 0.0, -0.01).is_err());
        assert!(bilinear(&grid, 5, 5, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn bilinear_channels_samples_each_plane() {
        let data: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let v = bilinear_channels(&data, 2, 2, 2, 0.5, 0.5).unwrap();
        assert_eq!(v, vec![1.5, 5.5]);
    }

    #[test]
    fn homography_roundtrip_and_parse() {
        let h = Homography::parse("1 0 5\n0 1 0\n0 0 1").unwrap();
        assert_eq!(h, Homography::translation(5.0, 0.0));
        assert_eq!(h.apply(1.0, 2.0), (6.0, 2.0));
        let text = Homography::new([[1.1, 0.02, 3.0], [-0.01, 0.95, 2.0], [1e-4, 2e-5, 1.0]])
            .unwrap()
            .to_text();
        let back = Homography::parse(&text).unwrap();
        let inv = back.inverse().unwrap();
        let (x, y) = back.apply(10.0, 20.0);
        let (x2, y2) = inv.apply(x, y);
        assert!((x2 - 10.0).abs() < 1e-9 && (y2 - 20.0).abs() < 1e-9);
        assert!(Homography::new([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
        assert!(Homography::parse("1 0 0 0 1").is_err());
    }

    #[test]
    fn warp_identity_and_translation() {
        let img = Image::from_fn(32, 24, |x, y| ((x * 7 + y * 13) % 17) as f32 / 17.0);
        assert_eq!(warp_homography(&img, &Homography::identity()).unwrap(), img);
        let out = warp_homography(&img, &Homography::translation(5.0, 0.0)).unwrap();
        for y in 0..24 {
            for c in 0..32 {
                if c >= 5 {
                    assert_eq!(out.get(c, y), img.get(c - 5, y));
                } else {
                    assert_eq!(out.get(c, y), 0.0);
                }
            }
        }
        let singular = Homography { m: [[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]] };
        assert!(warp_homography(&img, &singular).is_err());
    }

    #[test]
    fn downsample_means() {
        let c = Image::filled(8, 8, 0.25);
        assert_eq!(downsample(&c, 4).unwrap(), Image::filled(2, 2, 0.25));
        let b = Image::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(downsample(&b, 2).unwrap().data(), &[0.5]);
        assert!(matches!(
            downsample(&Image::filled(6, 8, 0.0), 4),
            Err(Error::NotDivisible { .. })
        ));
        assert!(downsample(&c, 3).is_err());
    }

    #[test]
    fn crop_copies_window() {
        let img = Image::from_fn(10, 10, |x, y| (x + 10 * y) as f32);
        let c = img.crop(2, 3, 4, 2).unwrap();
        assert_eq!(c.data(), &[32.0, 33.0, 34.0, 35.0, 42.0, 43.0, 44.0, 45.0]);
        assert!(img.crop(8, 0, 4, 1).is_err());
    }
}
