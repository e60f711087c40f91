//! Similarity and probability maps, integer peaks and windowed soft-argmax.

use crate::error::{Error, Result};
use crate::imgproc::{bilinear, Keypoint};
use crate::net::{DescriptorMap, KeypointDescriptor};
use crate::real::Real;

pub const DEFAULT_SOFT_WINDOW: usize = 5;
pub const DEFAULT_SOFT_TEMPERATURE: f64 = 0.05;
pub const DEFAULT_PROB_TEMPERATURE: f64 = 0.1;

/// Per-pixel cosine similarity of one descriptor against a dense map.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

/// Softmax-normalised similarity map; entries sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Real> SimilarityMap<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height || data.is_empty() {
            return Err(Error::SizeMismatch(format!(
                "similarity map {width}x{height} with {} values",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }
}

impl<T: Real> ProbabilityMap<T> {
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }
}

pub fn similarity_map<T: Real>(map: &DescriptorMap<T>, d: &KeypointDescriptor<T>) -> Result<SimilarityMap<T>> {
    similarity_raw(map, d.as_slice())
}

pub(crate) fn similarity_raw<T: Real>(map: &DescriptorMap<T>, d: &[T]) -> Result<SimilarityMap<T>> {
    if d.len() != map.dim {
        return Err(Error::SizeMismatch(format!(
            "descriptor has {} channels, map has {}",
            d.len(),
            map.dim
        )));
    }
    let plane = map.plane();
    let mut out = vec![T::zero(); plane];
    for (c, &dc) in d.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(&map.data[c * plane..(c + 1) * plane]) {
            *o += v * dc;
        }
    }
    SimilarityMap::new(map.width, map.height, out)
}

/// Row-major index of the global maximum; the first one in scan order wins
/// ties, i.e. lower `y`, then lower `x`. NaN entries are never selected unless
/// every entry is NaN.
pub fn argmax_index<T: Real>(data: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in data.iter().enumerate() {
        if v > data[best] || (data[best].is_nan() && !v.is_nan()) {
            best = i;
        }
    }
    best
}

/// Integer coordinates of the global maximum.
pub fn argmax_nms<T: Real>(sim: &SimilarityMap<T>) -> (usize, usize) {
    let i = argmax_index(&sim.data);
    (i % sim.width, i / sim.width)
}

/// Window radius per axis: `window/2` truncated symmetrically at borders.
#[inline]
pub(crate) fn soft_radius(n: usize, c: usize, window: usize) -> usize {
    (window / 2).min(c).min(n - 1 - c)
}

/// Softmax weights `exp((s − s_max)/T)` over the window around `center`,
/// row-major, plus the window geometry `(x0, y0, rx, ry)`.
pub(crate) fn soft_weights<T: Real>(
    sim: &SimilarityMap<T>,
    center: (usize, usize),
    window: usize,
    temperature: T,
) -> (Vec<T>, T, (usize, usize, usize, usize)) {
    let (cx, cy) = center;
    let rx = soft_radius(sim.width, cx, window);
    let ry = soft_radius(sim.height, cy, window);
    let (x0, y0) = (cx - rx, cy - ry);
    let (nw, nh) = (2 * rx + 1, 2 * ry + 1);
    let mut smax = T::neg_infinity();
    for y in y0..y0 + nh {
        for x in x0..x0 + nw {
            smax = smax.max(sim.get(x, y));
        }
    }
    let mut w = Vec::with_capacity(nw * nh);
    let mut z = T::zero();
    for y in y0..y0 + nh {
        for x in x0..x0 + nw {
            let e = ((sim.get(x, y) - smax) / temperature).exp();
            z += e;
            w.push(e);
        }
    }
    (w, z, (x0, y0, rx, ry))
}

/// Softmax-weighted centroid of pixel coordinates over the `window×window`
/// neighbourhood of `center`. The window shrinks symmetrically at borders so
/// that it stays centred.
pub fn soft_argmax<T: Real>(sim: &SimilarityMap<T>, center: (usize, usize), window: usize, temperature: T) -> (T, T) {
    let (w, z, (x0, y0, rx, ry)) = soft_weights(sim, center, window, temperature);
    let (nw, nh) = (2 * rx + 1, 2 * ry + 1);
    // offsets accumulated as Σk·(mass(+k) − mass(−k)) so that mirrored
    // weights cancel exactly
    let col = |i: usize| (0..nh).map(|r| w[r * nw + i]).sum::<T>();
    let row = |j: usize| w[j * nw..(j + 1) * nw].iter().copied().sum::<T>();
    let mut ox = T::zero();
    for k in 1..=rx {
        ox += T::lit(k as f64) * (col(rx + k) - col(rx - k));
    }
    let mut oy = T::zero();
    for k in 1..=ry {
        oy += T::lit(k as f64) * (row(ry + k) - row(ry - k));
    }
    (
        T::lit((x0 + rx) as f64) + ox / z,
        T::lit((y0 + ry) as f64) + oy / z,
    )
}

/// Sub-pixel peak: global argmax refined by [`soft_argmax`].
pub fn refine_peak<T: Real>(sim: &SimilarityMap<T>, window: usize, temperature: T) -> (T, T) {
    soft_argmax(sim, argmax_nms(sim), window, temperature)
}

/// `softmax((C − 1)/t)` over all entries.
pub fn probability_map<T: Real>(sim: &SimilarityMap<T>, t: T) -> ProbabilityMap<T> {
    let shifted: Vec<T> = sim.data.iter().map(|&s| (s - T::one()) / t).collect();
    let m = shifted.iter().copied().fold(T::neg_infinity(), T::max);
    let mut data: Vec<T> = shifted.iter().map(|&v| (v - m).exp()).collect();
    let z: T = data.iter().copied().sum();
    for v in &mut data {
        *v /= z;
    }
    ProbabilityMap {
        width: sim.width,
        height: sim.height,
        data,
    }
}

pub fn sample_probability<T: Real>(p: &ProbabilityMap<T>, x: T, y: T) -> Result<T> {
    bilinear(&p.data, p.width, p.height, x, y)
}

/// Clamps `(x, y)` into the grid, then samples. Used on the loss path.
pub(crate) fn sample_clamped<T: Real>(data: &[T], w: usize, h: usize, x: T, y: T) -> T {
    let (x, y) = clamp_point(w, h, x, y);
    crate::imgproc::bilinear_unchecked(data, w, h, x, y)
}

pub(crate) fn clamp_point<T: Real>(w: usize, h: usize, x: T, y: T) -> (T, T) {
    let mx = T::lit((w - 1) as f64);
    let my = T::lit((h - 1) as f64);
    (x.max(T::zero()).min(mx), y.max(T::zero()).min(my))
}

/// The four bilinear taps of `(x, y)` as `(index, weight, ∂w/∂x, ∂w/∂y)`.
/// Assumes the point is inside the grid.
pub(crate) fn bilinear_taps<T: Real>(w: usize, h: usize, x: T, y: T) -> [(usize, T, T, T); 4] {
    let x0f = x.floor();
    let y0f = y.floor();
    let x0 = x0f.to_usize().unwrap_or(0).min(w - 1);
    let y0 = y0f.to_usize().unwrap_or(0).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0f;
    let fy = y - y0f;
    let one = T::one();
    // derivatives vanish along an axis whose two taps coincide
    let sx = if x1 == x0 { T::zero() } else { one };
    let sy = if y1 == y0 { T::zero() } else { one };
    [
        (y0 * w + x0, (one - fx) * (one - fy), -sx * (one - fy), -sy * (one - fx)),
        (y0 * w + x1, fx * (one - fy), sx * (one - fy), -sy * fx),
        (y1 * w + x0, (one - fx) * fy, -sx * fy, sy * (one - fx)),
        (y1 * w + x1, fx * fy, sx * fy, sy * fx),
    ]
}

/// Integer peak of a similarity map as a keypoint carrying the peak value.
pub fn peak_keypoint<T: Real>(sim: &SimilarityMap<T>) -> Keypoint {
    let (x, y) = argmax_nms(sim);
    Keypoint::with_score(x as f32, y as f32, sim.get(x, y).as_f32())
}
