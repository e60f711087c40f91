//! Pyramidal Lucas–Kanade tracking with a forward-backward check, used to
//! manufacture pseudo ground-truth correspondences.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imgproc::{Image, Keypoint, DETECTION_MARGIN};

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    /// Total pyramid levels including the full-resolution base.
    pub levels: usize,
    /// Integration window side (odd).
    pub window: usize,
    pub max_iters: usize,
    /// Stop iterating once the update is below this many pixels.
    pub epsilon: f32,
    /// Maximum forward-backward round-trip distance for a valid track.
    pub fb_threshold: f32,
    /// Destinations must keep this distance from every border.
    pub margin: usize,
    /// Minimum eigenvalue of the normalised structure tensor.
    pub min_eigen: f64,
    /// Standardise each image to zero mean and unit variance first, which
    /// cancels global gain and bias changes.
    pub normalize: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            window: 21,
            max_iters: 30,
            epsilon: 0.01,
            fb_threshold: 1.0,
            margin: DETECTION_MARGIN,
            min_eigen: 1e-6,
            normalize: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowTrack {
    pub src: Keypoint,
    pub dst: Keypoint,
    pub fb_error: f32,
    pub valid: bool,
}

impl FlowTrack {
    pub fn flow(&self) -> (f32, f32) {
        (self.dst.x - self.src.x, self.dst.y - self.src.y)
    }
}

struct Level {
    img: Image,
    gx: Image,
    gy: Image,
}

/// Image pyramid with central-difference gradients at every level.
pub struct FlowPyramid {
    levels: Vec<Level>,
}

fn smooth_decimate(img: &Image) -> Image {
    const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (w, h) = (img.width(), img.height());
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0f32; w * h];
    for y in 0..h {
        let row = img.row(y);
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &c) in K.iter().enumerate() {
                acc += c * row[clampi(x as isize + k as isize - 2, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let (ow, oh) = (w / 2, h / 2);
    Image::from_fn(ow, oh, |ox, oy| {
        let (x, y) = (ox * 2, oy * 2);
        K.iter()
            .enumerate()
            .map(|(k, &c)| c * tmp[clampi(y as isize + k as isize - 2, h) * w + x])
            .sum()
    })
}

fn gradients(img: &Image) -> (Image, Image) {
    let (w, h) = (img.width(), img.height());
    let gx = Image::from_fn(w, h, |x, y| {
        let l = img.get(x.saturating_sub(1), y);
        let r = img.get((x + 1).min(w - 1), y);
        let span = ((x + 1).min(w - 1) - x.saturating_sub(1)) as f32;
        (r - l) / span
    });
    let gy = Image::from_fn(w, h, |x, y| {
        let u = img.get(x, y.saturating_sub(1));
        let d = img.get(x, (y + 1).min(h - 1));
        let span = ((y + 1).min(h - 1) - y.saturating_sub(1)) as f32;
        (d - u) / span
    });
    (gx, gy)
}

const MIN_LEVEL_SIDE: usize = 8;

impl FlowPyramid {
    pub fn build(img: &Image, levels: usize) -> Result<Self> {
        if levels == 0 {
            return Err(Error::InvalidArgument("pyramid needs at least one level".into()));
        }
        let coarse_w = img.width() >> (levels - 1);
        let coarse_h = img.height() >> (levels - 1);
        if coarse_w < MIN_LEVEL_SIDE || coarse_h < MIN_LEVEL_SIDE {
            return Err(Error::EmptyPyramid {
                width: img.width(),
                height: img.height(),
                levels,
            });
        }
        let mut out = Vec::with_capacity(levels);
        let mut cur = img.clone();
        for l in 0..levels {
            let (gx, gy) = gradients(&cur);
            let next = (l + 1 < levels).then(|| smooth_decimate(&cur));
            out.push(Level { img: cur, gx, gy });
            match next {
                Some(n) => cur = n,
                None => break,
            }
        }
        Ok(Self { levels: out })
    }

    /// Pyramid of `img`, standardised first when `cfg.normalize` is set.
    pub fn for_config(img: &Image, cfg: &FlowConfig) -> Result<Self> {
        if !cfg.normalize {
            return Self::build(img, cfg.levels);
        }
        let n = img.data().len() as f64;
        let mean = img.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = img.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
        let data = img.data().iter().map(|&v| ((v as f64 - mean) * inv) as f32).collect();
        Self::build(&Image::new(img.width(), img.height(), data)?, cfg.levels)
    }

    pub fn levels(&self) -> usize {
        self.levels.len()
    }

    pub fn base(&self) -> &Image {
        &self.levels[0].img
    }
}

/// Tracks one point from `from` into `to`; `None` when the point is lost.
fn track_point(from: &FlowPyramid, to: &FlowPyramid, x: f32, y: f32, cfg: &FlowConfig) -> Option<(f32, f32)> {
    let r = (cfg.window / 2) as i32;
    let n = cfg.window * cfg.window;
    let mut tmpl = vec![0f32; n];
    let mut tgx = vec![0f32; n];
    let mut tgy = vec![0f32; n];
    let (mut gx_guess, mut gy_guess) = (0f32, 0f32);
    let top = from.levels.len() - 1;
    for l in (0..=top).rev() {
        let scale = 1.0 / (1u32 << l) as f32;
        let (px, py) = (x * scale, y * scale);
        let lvl_a = &from.levels[l];
        let lvl_b = &to.levels[l];
        let (mut gxx, mut gxy, mut gyy) = (0f64, 0f64, 0f64);
        let mut k = 0;
        for j in -r..=r {
            for i in -r..=r {
                let (sx, sy) = (px + i as f32, py + j as f32);
                tmpl[k] = lvl_a.img.sample_clamped(sx, sy);
                let ix = lvl_a.gx.sample_clamped(sx, sy);
                let iy = lvl_a.gy.sample_clamped(sx, sy);
                tgx[k] = ix;
                tgy[k] = iy;
                gxx += (ix * ix) as f64;
                gxy += (ix * iy) as f64;
                gyy += (iy * iy) as f64;
                k += 1;
            }
        }
        let nf = n as f64;
        let (a, b, c) = (gxx / nf, gxy / nf, gyy / nf);
        let min_eig = 0.5 * (a + c) - (0.25 * (a - c) * (a - c) + b * b).sqrt();
        let det = gxx * gyy - gxy * gxy;
        if min_eig < cfg.min_eigen || det.abs() < 1e-18 {
            return None;
        }
        let (mut dx, mut dy) = (0f32, 0f32);
        let wl = lvl_b.img.width() as f32;
        let hl = lvl_b.img.height() as f32;
        for _ in 0..cfg.max_iters {
            let (cx, cy) = (px + gx_guess + dx, py + gy_guess + dy);
            if !(cx >= -(r as f32) && cy >= -(r as f32) && cx < wl + r as f32 && cy < hl + r as f32) {
                return None;
            }
            let (mut bx, mut by) = (0f64, 0f64);
            let mut k = 0;
            for j in -r..=r {
                for i in -r..=r {
                    let v = lvl_b.img.sample_clamped(cx + i as f32, cy + j as f32);
                    let e = (tmpl[k] - v) as f64;
                    bx += e * tgx[k] as f64;
                    by += e * tgy[k] as f64;
                    k += 1;
                }
            }
            let ux = ((gyy * bx - gxy * by) / det) as f32;
            let uy = ((gxx * by - gxy * bx) / det) as f32;
            if !ux.is_finite() || !uy.is_finite() {
                return None;
            }
            dx += ux;
            dy += uy;
            if ux * ux + uy * uy < cfg.epsilon * cfg.epsilon {
                break;
            }
        }
        if l > 0 {
            gx_guess = 2.0 * (gx_guess + dx);
            gy_guess = 2.0 * (gy_guess + dy);
        } else {
            gx_guess += dx;
            gy_guess += dy;
        }
    }
    Some((x + gx_guess, y + gy_guess))
}

fn within_margin(img: &Image, x: f32, y: f32, margin: usize) -> bool {
    let m = margin as f32;
    x >= m && y >= m && x <= (img.width() - 1) as f32 - m && y <= (img.height() - 1) as f32 - m
}

/// Tracks on prebuilt pyramids; see [`lk_track`].
pub fn lk_track_pyramids(
    pyr_a: &FlowPyramid,
    pyr_b: &FlowPyramid,
    pts: &[Keypoint],
    cfg: &FlowConfig,
) -> Result<Vec<FlowTrack>> {
    let (a, b) = (pyr_a.base(), pyr_b.base());
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::SizeMismatch(format!(
            "flow images {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    if pyr_a.levels() != pyr_b.levels() {
        return Err(Error::SizeMismatch("pyramid depths differ".into()));
    }
    Ok(pts
        .par_iter()
        .map(|&src| {
            let lost = FlowTrack {
                src,
                dst: src,
                fb_error: f32::INFINITY,
                valid: false,
            };
            let Some((fx, fy)) = track_point(pyr_a, pyr_b, src.x, src.y, cfg) else {
                return lost;
            };
            let dst = Keypoint::with_score(fx, fy, src.score);
            let Some((bx, by)) = track_point(pyr_b, pyr_a, fx, fy, cfg) else {
                return FlowTrack { dst, ..lost };
            };
            let fb_error = (bx - src.x).hypot(by - src.y);
            let valid = fb_error <= cfg.fb_threshold && within_margin(b, fx, fy, cfg.margin);
            FlowTrack {
                src,
                dst,
                fb_error,
                valid,
            }
        })
        .collect())
}

/// Forward-backward pyramidal LK. Every input point yields one track; failed
/// tracks are kept with `valid == false`.
pub fn lk_track(img_a: &Image, img_b: &Image, pts: &[Keypoint], cfg: &FlowConfig) -> Result<Vec<FlowTrack>> {
    if img_a.width() != img_b.width() || img_a.height() != img_b.height() {
        return Err(Error::SizeMismatch(format!(
            "flow images {}x{} vs {}x{}",
            img_a.width(),
            img_a.height(),
            img_b.width(),
            img_b.height()
        )));
    }
    let pa = FlowPyramid::for_config(img_a, cfg)?;
    let pb = FlowPyramid::for_config(img_b, cfg)?;
    lk_track_pyramids(&pa, &pb, pts, cfg)
}

/// `(src, dst)` of the valid tracks, in input order.
pub fn bidirectional_filter(tracks: &[FlowTrack]) -> Vec<(Keypoint, Keypoint)> {
    tracks
        .iter()
        .filter(|t| t.valid)
        .map(|t| (t.src, t.dst))
        .collect()
}

/// Pseudo-label dump: `x_a y_a x_b y_b fb_error valid`, one track per line.
pub fn format_pseudo_labels(tracks: &[FlowTrack]) -> String {
    let mut s = String::new();
    for t in tracks {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            t.src.x,
            t.src.y,
            t.dst.x,
            t.dst.y,
            t.fb_error,
            u8::from(t.valid)
        );
    }
    s
}

pub fn write_pseudo_labels(tracks: &[FlowTrack], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_pseudo_labels(tracks)).map_err(|e| Error::io(path, e))
}

pub fn parse_pseudo_labels(text: &str) -> Result<Vec<FlowTrack>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(Error::Format(format!("pseudo-label line {}: expected 6 fields", ln + 1)));
        }
        let num = |s: &str| -> Result<f32> {
            s.parse::<f32>()
                .map_err(|_| Error::Format(format!("pseudo-label line {}: bad number `{s}`", ln + 1)))
        };
        out.push(FlowTrack {
            src: Keypoint::new(num(f[0])?, num(f[1])?),
            dst: Keypoint::new(num(f[2])?, num(f[3])?),
            fb_error: num(f[4])?,
            valid: match f[5] {
                "1" => true,
                "0" => false,
                o => return Err(Error::Format(format!("pseudo-label line {}: bad flag `{o}`", ln + 1))),
            },
        });
    }
    Ok(out)
}

pub fn read_pseudo_labels(path: impl AsRef<Path>) -> Result<Vec<FlowTrack>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pseudo_labels(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(x: f32, y: f32, fb: f32, valid: bool) -> FlowTrack {
        FlowTrack {
            src: Keypoint::new(x, y),
            dst: Keypoint::new(x + 1.0, y),
            fb_error: fb,
            valid,
        }
    }

    #[test]
    fn filter_keeps_valid_in_order() {
        let ts = vec![track(1.0, 1.0, 0.1, true), track(2.0, 2.0, 5.0, false), track(3.0, 3.0, 0.2, true)];
        let f = bidirectional_filter(&ts);
        assert_eq!(f.len(), 2);
        assert_eq!(f[0].0.x, 1.0);
        assert_eq!(f[1].0.x, 3.0);
        assert!(bidirectional_filter(&ts[1..2]).is_empty());
        assert_eq!(bidirectional_filter(&[ts[0], ts[2]]).len(), 2);
    }

    #[test]
    fn pseudo_label_text_roundtrip() {
        let ts = vec![track(1.5, 2.25, 0.125, true), track(3.0, 4.0, f32::INFINITY, false)];
        let back = parse_pseudo_labels(&format_pseudo_labels(&ts)).unwrap();
        assert_eq!(back, ts);
        assert!(parse_pseudo_labels("1 2 3").is_err());
    }

    #[test]
    fn pyramid_too_small() {
        let img = Image::filled(20, 20, 0.0);
        assert!(matches!(FlowPyramid::build(&img, 3), Err(Error::EmptyPyramid { .. })));
        assert_eq!(FlowPyramid::build(&img, 2).unwrap().levels(), 2);
    }

    #[test]
    fn size_mismatch_is_reported() {
        let a = Image::filled(64, 64, 0.0);
        let b = Image::filled(64, 48, 0.0);
        assert!(matches!(lk_track(&a, &b, &[], &FlowConfig::default()), Err(Error::SizeMismatch(_))));
    }
}
