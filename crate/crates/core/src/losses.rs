//! Training objectives evaluated on plain values.
//!
//! The differentiable versions used during training live in [`crate::head`]
//! and call into the same window and mask helpers defined here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::Keypoint;
use crate::matching::{sample_clamped, ProbabilityMap, SimilarityMap};
use crate::real::Real;

/// Floor applied to sampled probabilities before `ln`.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub zeta: f64,
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.5,
            gamma: 1.0,
            delta: 0.5,
            epsilon: 1.0,
            zeta: 5.0,
            eta: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.delta, self.epsilon, self.zeta, self.eta];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Weights in [`LossTerms::as_array`] order.
    pub fn as_array(&self) -> [f64; 7] {
        [self.alpha, self.beta, self.gamma, self.delta, self.epsilon, self.zeta, self.eta]
    }
}

/// Values of the seven terms. Absent terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rp: f64,
    pub lpk: f64,
    pub hm: f64,
    pub desc: f64,
    pub srp: f64,
    pub mrp: f64,
    pub mhm: f64,
}

impl LossTerms {
    pub fn as_array(&self) -> [f64; 7] {
        [self.rp, self.lpk, self.hm, self.desc, self.srp, self.mrp, self.mhm]
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

/// How many items each term saw and how many the thresholds removed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterCounts {
    pub items: usize,
    pub srp_pairs: usize,
    pub srp_filtered: usize,
    pub mrp_points: usize,
    pub mrp_filtered: usize,
    pub mhm_maps: usize,
    pub mhm_empty: usize,
    pub skipped: usize,
}

impl FilterCounts {
    pub fn merge(&mut self, o: &FilterCounts) {
        self.items += o.items;
        self.srp_pairs += o.srp_pairs;
        self.srp_filtered += o.srp_filtered;
        self.mrp_points += o.mrp_points;
        self.mrp_filtered += o.mrp_filtered;
        self.mhm_maps += o.mhm_maps;
        self.mhm_empty += o.mhm_empty;
        self.skipped += o.skipped;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: LossTerms,
    pub total: f64,
    pub filtered_counts: FilterCounts,
}

impl LossReport {
    /// Report whose total is the weighted sum of `terms`.
    pub fn new(terms: LossTerms, w: &LossWeights, counts: FilterCounts) -> Self {
        Self {
            terms,
            total: weighted_total(&terms, w),
            filtered_counts: counts,
        }
    }
}

/// `Σ weight·term`, accumulated in a fixed order.
pub fn weighted_total(t: &LossTerms, w: &LossWeights) -> f64 {
    let mut acc = 0.0;
    for (v, k) in t.as_array().iter().zip(w.as_array()) {
        acc += k * v;
    }
    acc
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SupTerms {
    pub rp: f64,
    pub lpk: f64,
    pub hm: f64,
    pub desc: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SelfTerms {
    pub srp: f64,
    pub mrp: f64,
    pub mhm: f64,
}

/// `α·L_rp + β·L_lpk + γ·L_hm + δ·L_desc`.
pub fn loss_sup(t: &SupTerms, w: &LossWeights) -> LossReport {
    let terms = LossTerms {
        rp: t.rp,
        lpk: t.lpk,
        hm: t.hm,
        desc: t.desc,
        ..LossTerms::default()
    };
    LossReport::new(terms, w, FilterCounts::default())
}

/// `ε·L_srp + ζ·L_mrp + η·L_mhm`.
pub fn loss_self(t: &SelfTerms, w: &LossWeights) -> LossReport {
    let terms = LossTerms {
        srp: t.srp,
        mrp: t.mrp,
        mhm: t.mhm,
        ..LossTerms::default()
    };
    LossReport::new(terms, w, FilterCounts::default())
}

pub fn reproj_dist(a: &Keypoint, b: &Keypoint) -> f32 {
    a.distance(b)
}

#[inline]
pub fn dist<T: Real>(a: (T, T), b: (T, T)) -> T {
    let dx = a.0 - b.0;
    let dy = a.1 - b.1;
    (dx * dx + dy * dy).sqrt()
}

/// One correspondence seen from both sides.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RpPair<T> {
    pub mapped_b: (T, T),
    pub gt_b: (T, T),
    pub mapped_a: (T, T),
    pub gt_a: (T, T),
}

/// Mean over pairs of the symmetric reprojection residual.
pub fn loss_rp<T: Real>(pairs: &[RpPair<T>]) -> Result<T> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("reprojection loss over zero pairs".into()));
    }
    let s: T = pairs
        .iter()
        .map(|p| dist(p.mapped_b, p.gt_b) + dist(p.mapped_a, p.gt_a))
        .sum();
    Ok(s / T::lit(pairs.len() as f64))
}

/// Top-left corner of the `n×n` window centred on `round(kp)`, shifted to
/// lie inside a `w×h` map. `n` is reduced to the map size if larger.
pub(crate) fn peaky_window<T: Real>(w: usize, h: usize, kp: (T, T), n: usize) -> (usize, usize, usize, usize) {
    let nw = n.min(w);
    let nh = n.min(h);
    let place = |c: T, len: usize, side: usize| -> usize {
        let r = (c + T::lit(0.5)).floor().to_i64().unwrap_or(0);
        let lo = r - (len / 2) as i64;
        lo.clamp(0, (side - len) as i64) as usize
    };
    (place(kp.0, nw, w), place(kp.1, nh, h), nw, nh)
}

/// Window softmax weights `softmax((s − s_max)/t_det)` and the distances from
/// each window pixel to `kp`, both row-major.
pub(crate) fn peaky_terms<T: Real>(sim: &SimilarityMap<T>, kp: (T, T), n: usize, t_det: T) -> (Vec<T>, Vec<T>, usize) {
    let (x0, y0, nw, nh) = peaky_window(sim.width, sim.height, kp, n);
    let mut smax = T::neg_infinity();
    for y in y0..y0 + nh {
        for x in x0..x0 + nw {
            smax = smax.max(sim.get(x, y));
        }
    }
    let mut wts = Vec::with_capacity(nw * nh);
    let mut d = Vec::with_capacity(nw * nh);
    for y in y0..y0 + nh {
        for x in x0..x0 + nw {
            wts.push(((sim.get(x, y) - smax) / t_det).exp());
            d.push(dist(kp, (T::lit(x as f64), T::lit(y as f64))));
        }
    }
    let z: T = wts.iter().copied().sum();
    for v in &mut wts {
        *v /= z;
    }
    (wts, d, nw * nh)
}

/// Distance-weighted window softmax around `kp`, divided by `N²`.
pub fn loss_lpk<T: Real>(sim: &SimilarityMap<T>, kp: (T, T), n: usize, t_det: T) -> T {
    let (w, d, _) = peaky_terms(sim, kp, n, t_det);
    let s: T = w.iter().zip(&d).map(|(&a, &b)| a * b).sum();
    s / T::lit((n * n) as f64)
}

/// Normalised 2-D Gaussian density on the pixel grid.
pub fn gaussian_density<T: Real>(w: usize, h: usize, center: (T, T), sigma: T) -> Vec<T> {
    let norm = T::one() / (T::lit(2.0 * std::f64::consts::PI) * sigma * sigma);
    gaussian_target(w, h, center, sigma).into_iter().map(|v| v * norm).collect()
}

/// [`gaussian_density`] divided by its analytic peak `1/(2πσ²)`, so the
/// centre value is exactly 1.
pub fn gaussian_target<T: Real>(w: usize, h: usize, center: (T, T), sigma: T) -> Vec<T> {
    let two_s2 = T::lit(2.0) * sigma * sigma;
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let dx = T::lit(x as f64) - center.0;
            let dy = T::lit(y as f64) - center.1;
            out.push((-(dx * dx + dy * dy) / two_s2).exp());
        }
    }
    out
}

/// Mean squared error over all pixels.
pub fn loss_hm<T: Real>(sim: &SimilarityMap<T>, target: &[T]) -> Result<T> {
    if sim.data.len() != target.len() {
        return Err(Error::SizeMismatch(format!(
            "heatmap target has {} pixels, map has {}",
            target.len(),
            sim.data.len()
        )));
    }
    let s: T = sim.data.iter().zip(target).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(s / T::lit(target.len() as f64))
}

/// `½·(−ln P_ab(gt_b) − ln P_ba(gt_a))` with probabilities floored.
pub fn loss_desc<T: Real>(p_ab: &ProbabilityMap<T>, gt_b: (T, T), p_ba: &ProbabilityMap<T>, gt_a: (T, T)) -> T {
    let floor = T::lit(PROB_FLOOR);
    let pb = sample_clamped(&p_ab.data, p_ab.width, p_ab.height, gt_b.0, gt_b.1).max(floor);
    let pa = sample_clamped(&p_ba.data, p_ba.width, p_ba.height, gt_a.0, gt_a.1).max(floor);
    T::lit(0.5) * (-pb.ln() - pa.ln())
}

/// Result of a thresholded distance average.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholded<T> {
    pub value: T,
    pub included: usize,
    pub filtered: usize,
}

/// `estimates_ab[j]` holds the estimates from the consecutive source patches
/// `i = 0..m` matched into target patch `j`; `estimates_ba[i]` likewise in the
/// other direction. Consecutive pairs further apart than `tau` are dropped;
/// the kept distances are summed and divided by `m + n`.
pub fn loss_srp<T: Real>(estimates_ab: &[Vec<(T, T)>], estimates_ba: &[Vec<(T, T)>], tau: T) -> Result<Thresholded<T>> {
    let m = estimates_ab.iter().map(|v| v.len()).max().unwrap_or(0);
    let n = estimates_ba.iter().map(|v| v.len()).max().unwrap_or(0);
    if m < 2 && n < 2 {
        return Err(Error::EmptyInput("single consistency needs two estimates on one side".into()));
    }
    let mut sum = T::zero();
    let (mut inc, mut filt) = (0, 0);
    for row in estimates_ab.iter().chain(estimates_ba) {
        for p in row.windows(2) {
            let d = dist(p[0], p[1]);
            if d <= tau {
                sum += d;
                inc += 1;
            } else {
                filt += 1;
            }
        }
    }
    Ok(Thresholded {
        value: sum / T::lit((m + n) as f64),
        included: inc,
        filtered: filt,
    })
}

/// Mean distance between chained and direct estimates over the points whose
/// distance does not exceed `tau`; 0 when every point is filtered.
pub fn loss_mrp<T: Real>(chained: &[(T, T)], direct: &[(T, T)], tau: T) -> Result<Thresholded<T>> {
    if chained.is_empty() || chained.len() != direct.len() {
        return Err(Error::EmptyInput(format!(
            "{} chained vs {} direct estimates",
            chained.len(),
            direct.len()
        )));
    }
    let mut sum = T::zero();
    let (mut inc, mut filt) = (0, 0);
    for (&a, &b) in chained.iter().zip(direct) {
        let d = dist(a, b);
        if d <= tau {
            sum += d;
            inc += 1;
        } else {
            filt += 1;
        }
    }
    let value = if inc == 0 { T::zero() } else { sum / T::lit(inc as f64) };
    Ok(Thresholded {
        value,
        included: inc,
        filtered: filt,
    })
}

/// Pixels where either map is confident (`≥ tau_sim`). Symmetric in its
/// arguments.
pub fn mhm_mask<T: Real>(a: &[T], b: &[T], tau_sim: T) -> Vec<bool> {
    a.iter().zip(b).map(|(&x, &y)| x.max(y) >= tau_sim).collect()
}

/// Masked mean squared difference. Returns `(value, masked pixel count)`;
/// an empty mask gives 0.
pub fn loss_mhm<T: Real>(c_first: &SimilarityMap<T>, c_prev: &SimilarityMap<T>, tau_sim: T) -> Result<(T, usize)> {
    if c_first.width != c_prev.width || c_first.height != c_prev.height {
        return Err(Error::SizeMismatch("similarity maps differ in shape".into()));
    }
    let mask = mhm_mask(&c_first.data, &c_prev.data, tau_sim);
    Ok(masked_mse(&c_first.data, &c_prev.data, &mask))
}

pub(crate) fn masked_mse<T: Real>(a: &[T], b: &[T], mask: &[bool]) -> (T, usize) {
    let mut s = T::zero();
    let mut k = 0;
    for ((&x, &y), &m) in a.iter().zip(b).zip(mask) {
        if m {
            s += (x - y) * (x - y);
            k += 1;
        }
    }
    if k == 0 {
        log::debug!("multi-frame heatmap mask is empty");
        return (T::zero(), 0);
    }
    (s / T::lit(k as f64), k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim(w: usize, h: usize, data: Vec<f64>) -> SimilarityMap<f64> {
        SimilarityMap::new(w, h, data).unwrap()
    }

    #[test]
    fn weighted_totals() {
        let w = LossWeights::default();
        let s = loss_sup(&SupTerms { rp: 1.0, lpk: 1.0, hm: 1.0, desc: 1.0 }, &w);
        assert_eq!(s.total, 3.0);
        let t = loss_self(&SelfTerms { srp: 1.0, mrp: 1.0, mhm: 1.0 }, &w);
        assert_eq!(t.total, 11.0);
        assert_eq!(loss_sup(&SupTerms::default(), &w).total, 0.0);
    }

    #[test]
    fn rp_arithmetic() {
        let p = RpPair { mapped_b: (2.0, 0.0), gt_b: (0.0, 0.0), mapped_a: (0.0, 4.0), gt_a: (0.0, 0.0) };
        assert_eq!(loss_rp(&[p]).unwrap(), 6.0);
        assert!(loss_rp::<f64>(&[]).is_err());
        assert_eq!(reproj_dist(&Keypoint::new(0.0, 0.0), &Keypoint::new(3.0, 4.0)), 5.0);
    }

    #[test]
    fn lpk_uniform_window() {
        let s = sim(9, 9, vec![0.2; 81]);
        let kp = (4.0, 4.0);
        let mut oracle = 0.0;
        for y in 2..7 {
            for x in 2..7 {
                oracle += ((x as f64 - 4.0).powi(2) + (y as f64 - 4.0).powi(2)).sqrt();
            }
        }
        let v = loss_lpk(&s, kp, 5, 0.1);
        assert!((v - oracle / 625.0).abs() < 1e-12);
    }

    #[test]
    fn lpk_delta_is_near_zero() {
        let mut d = vec![0.0; 81];
        d[4 * 9 + 4] = 1.0;
        assert!(loss_lpk(&sim(9, 9, d), (4.0, 4.0), 5, 1e-3) < 1e-3);
    }

    #[test]
    fn lpk_window_stays_inside() {
        assert_eq!(peaky_window(10, 10, (0.2, 9.0), 5), (0, 5, 5, 5));
        assert_eq!(peaky_window(10, 10, (5.5, 4.4), 5), (4, 2, 5, 5));
    }

    #[test]
    fn gaussian_values() {
        let raw = gaussian_density(9, 9, (4.0, 4.0), 2.0);
        assert!((raw[4 * 9 + 4] - 1.0 / (8.0 * std::f64::consts::PI)).abs() < 1e-15);
        let t = gaussian_target(9, 9, (4.0, 4.0), 2.0);
        assert_eq!(t[4 * 9 + 4], 1.0);
        assert!((t[4 * 9 + 6] - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn hm_offset() {
        let t = vec![0.5; 16];
        let s = sim(4, 4, vec![0.6; 16]);
        assert!((loss_hm(&s, &t).unwrap() - 0.01).abs() < 1e-12);
        assert!(loss_hm(&s, &t[..4]).is_err());
    }

    #[test]
    fn desc_uniform() {
        let p = ProbabilityMap { width: 8, height: 8, data: vec![1.0 / 64.0; 64] };
        let v = loss_desc(&p, (3.3, 2.1), &p, (0.0, 7.0));
        assert!((v - 64f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn srp_examples() {
        let r = loss_srp(&[vec![(0.0, 0.0), (3.0, 0.0)]], &[], 5.0).unwrap();
        assert_eq!(r.value, 1.5);
        let r = loss_srp(&[vec![(0.0, 0.0), (30.0, 0.0)]], &[], 5.0).unwrap();
        assert_eq!((r.value, r.filtered), (0.0, 1));
        assert!(loss_srp::<f64>(&[vec![(0.0, 0.0)]], &[], 5.0).is_err());
    }

    #[test]
    fn mrp_examples() {
        let r = loss_mrp(&[(2.0, 0.0)], &[(0.0, 0.0)], 5.0).unwrap();
        assert_eq!(r.value, 2.0);
        let r = loss_mrp(&[(2.0, 0.0), (0.0, 9.0)], &[(0.0, 0.0), (0.0, 0.0)], 5.0).unwrap();
        assert_eq!((r.value, r.included, r.filtered), (2.0, 1, 1));
    }

    #[test]
    fn mhm_empty_mask_is_zero() {
        let a = sim(2, 2, vec![0.1; 4]);
        let b = sim(2, 2, vec![0.2; 4]);
        assert_eq!(loss_mhm(&a, &b, 0.5).unwrap(), (0.0, 0));
        let c = sim(2, 2, vec![0.9; 4]);
        let d = sim(2, 2, vec![0.8; 4]);
        let (v, k) = loss_mhm(&c, &d, 0.5).unwrap();
        assert!((v - 0.01).abs() < 1e-12 && k == 4);
    }
}
