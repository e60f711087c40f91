#![allow(dead_code)]

use patchtrack::eval::synth::{generate, SynthDataset, SynthSpec};
use patchtrack::imgproc::{detect_keypoints, DetectConfig, Keypoint};
use patchtrack::infer::{match_points, MatchMode, PointResult};
use patchtrack::losses::LossWeights;
use patchtrack::net::ParamSet;
use patchtrack::patches::{extract_patch, jittered_patches};
use patchtrack::train::{
    batch_loss, batch_loss_and_grad, ImagePair, ObjectiveConfig, PairItem, SequenceItem, Term, TrainConfig, TrainItem,
    TrainMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Unit weight on `t` only.
pub fn weights_for(t: Term) -> LossWeights {
    let mut a = [0.0; 7];
    a[t as usize] = 1.0;
    LossWeights { alpha: a[0], beta: a[1], gamma: a[2], delta: a[3], epsilon: a[4], zeta: a[5], eta: a[6] }
}

/// Two pair items and one four-frame sequence item with 32×32 patches cut
/// from seeded synthetic imagery at non-integer keypoints.
pub fn gradcheck_items() -> Vec<TrainItem> {
    let spec = SynthSpec { width: 96, height: 96, pairs: 1, clips: 1, clip_len: 4, ..SynthSpec::default() };
    let ds = generate(&spec).unwrap();
    let p = &ds.pairs[0];
    let (tx, ty) = (p.h.matrix()[0][2] as f32, p.h.matrix()[1][2] as f32);
    let mut items = Vec::new();
    for &(x, y) in &[(40.3f32, 44.7f32), (52.0, 50.5)] {
        let a = extract_patch(&p.a, &Keypoint::new(x, y), 32).unwrap();
        let b = extract_patch(&p.b, &Keypoint::new(x + tx, y + ty), 32).unwrap();
        items.push(TrainItem::Pair(PairItem { a, b }));
    }
    let c = &ds.clips[0];
    let kp = |i: usize| Keypoint::new(48.2 + c.motion[i].0 as f32, 47.6 + c.motion[i].1 as f32);
    let frames: Vec<_> = (0..4).map(|i| extract_patch(&c.frames[i], &kp(i), 32).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let jitter_a = jittered_patches(&c.frames[0], &kp(0), 32, 2, 8, &mut rng).unwrap();
    let jitter_b = jittered_patches(&c.frames[1], &kp(1), 32, 2, 8, &mut rng).unwrap();
    items.push(TrainItem::Sequence(SequenceItem { frames, jitter_a, jitter_b }));
    items
}

/// Items that exercise `t`: pair items for supervised terms, the sequence
/// item for consistency terms.
pub fn items_for(items: &[TrainItem], t: Term) -> Vec<&TrainItem> {
    match t {
        Term::Rp | Term::Lpk | Term::Hm | Term::Desc => items[..2].iter().collect(),
        _ => items[2..].iter().collect(),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FdOutcome {
    pub tested: usize,
    pub failures: usize,
    pub worst: f64,
    /// Samples discarded because `h` and `2h` central differences disagreed.
    pub screened: usize,
    /// Tested samples whose gradient is identically zero by construction.
    pub structural_zero: usize,
}

/// Conv biases ahead of an instance norm are cancelled by its mean
/// subtraction, so their gradient is exactly zero and a central difference
/// measures only roundoff.
pub fn is_cancelled_bias<T: patchtrack::Real>(p: &ParamSet<T>, i: usize) -> bool {
    let name = p.name_of_flat(i);
    p.arch().norm != patchtrack::NormKind::None && name.ends_with(".bias") && !name.starts_with("fuse")
}

/// Compares analytic gradients with central differences on `samples`
/// randomly drawn parameters. With `screen`, a parameter whose `h` and `2h`
/// differences disagree by more than `screen` (relative) sits on a kink of a
/// piecewise term and is redrawn.
#[allow(clippy::too_many_arguments)]
pub fn fd_check(
    params: &ParamSet<f64>,
    items: &[&TrainItem],
    cfg: &ObjectiveConfig,
    w: &LossWeights,
    samples: usize,
    h: f64,
    tol: f64,
    screen: Option<f64>,
    seed: u64,
) -> FdOutcome {
    let (_, g) = batch_loss_and_grad(params, items, cfg, w).unwrap();
    let mut gp = params.clone();
    gp.zero_grads();
    gp.accumulate(&g, 1.0);
    let n = params.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fd = |i: usize, h: f64| {
        let mut q = params.clone();
        let v = q.get_flat(i);
        q.set_flat(i, v + h);
        let lp = batch_loss(&q, items, cfg, w).unwrap().total;
        q.set_flat(i, v - h);
        let lm = batch_loss(&q, items, cfg, w).unwrap().total;
        (lp - lm) / (2.0 * h)
    };
    let mut out = FdOutcome { tested: 0, failures: 0, worst: 0.0, screened: 0, structural_zero: 0 };
    while out.tested < samples {
        assert!(out.screened <= 4 * samples, "too many non-smooth samples");
        let i = rng.random_range(0..n);
        let f1 = fd(i, h);
        if let Some(s) = screen {
            let f2 = fd(i, 2.0 * h);
            if (f1 - f2).abs() > s * f1.abs().max(f2.abs()).max(1e-8) {
                out.screened += 1;
                continue;
            }
        }
        out.tested += 1;
        let an = gp.grad_flat(i);
        if is_cancelled_bias(params, i) {
            out.structural_zero += 1;
            if an.abs() > 1e-12 || f1.abs() > 1e-8 {
                out.failures += 1;
            }
            continue;
        }
        let rel = (an - f1).abs() / an.abs().max(f1.abs()).max(1e-8);
        out.worst = out.worst.max(rel);
        if rel >= tol {
            out.failures += 1;
        }
    }
    out
}

/// Shared settings of the learning checks.
pub fn learning_config(mode: TrainMode) -> TrainConfig {
    TrainConfig {
        mode,
        patch_size: 32,
        learning_rate: 2e-3,
        batch_size: 8,
        seed: 3,
        max_per_pair: 30,
        ..TrainConfig::default()
    }
}

pub fn clip_spec(clips: usize, seed: u64) -> SynthSpec {
    SynthSpec { pairs: 0, clips, clip_len: 10, clip_noise: 0.01, seed, ..SynthSpec::default() }
}

/// Consecutive clip frames as unlabelled pairs.
pub fn consecutive_pairs(clips: &[Vec<patchtrack::Image>]) -> Vec<ImagePair> {
    clips
        .iter()
        .flat_map(|f| f.windows(2).map(|w| ImagePair { a: w[0].clone(), b: w[1].clone(), h: None }))
        .collect()
}

/// Mean distance between the frame-by-frame chained track end and the
/// analytic end position, over tracks that survive the whole clip.
pub fn chained_drift(p: &ParamSet<f32>, ds: &SynthDataset) -> (f64, usize) {
    let det = DetectConfig { max_points: 20, ..DetectConfig::default() };
    let mode = MatchMode::single(32);
    let (mut sum, mut n) = (0.0, 0usize);
    for c in &ds.clips {
        let k0 = detect_keypoints(&c.frames[0], &det);
        let mut cur: Vec<Option<Keypoint>> = k0.iter().map(|&k| Some(k)).collect();
        for t in 1..c.frames.len() {
            let live: Vec<usize> = (0..cur.len()).filter(|&i| cur[i].is_some()).collect();
            let kps: Vec<Keypoint> = live.iter().map(|&i| cur[i].unwrap()).collect();
            let res = match_points(p, &c.frames[t - 1], &c.frames[t], &kps, &mode, None).unwrap();
            for (&i, r) in live.iter().zip(res) {
                cur[i] = match r {
                    PointResult::Matched(m) => Some(m.dst),
                    _ => None,
                };
            }
        }
        let m = c.motion[c.frames.len() - 1];
        for (k, e) in k0.iter().zip(&cur) {
            if let Some(e) = e {
                sum += ((k.x as f64 + m.0) - e.x as f64).hypot((k.y as f64 + m.1) - e.y as f64);
                n += 1;
            }
        }
    }
    (sum / n.max(1) as f64, n)
}

/// Direct `same`-padded convolution, channel-major.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(x: &[f64], cin: usize, w: usize, h: usize, wt: &[f64], b: &[f64], cout: usize, k: usize) -> Vec<f64> {
    let p = (k / 2) as isize;
    let mut out = vec![0.0; cout * w * h];
    for co in 0..cout {
        for y in 0..h {
            for xx in 0..w {
                let mut s = b[co];
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (sy, sx) = (y as isize + ky as isize - p, xx as isize + kx as isize - p);
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                s += wt[((co * cin + ci) * k + ky) * k + kx] * x[(ci * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                }
                out[(co * h + y) * w + xx] = s;
            }
        }
    }
    out
}

/// Greedy NMS by the same visiting order, checking every kept point.
pub fn naive_nms(pts: &[Keypoint], r: f32) -> Vec<Keypoint> {
    let mut order = pts.to_vec();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.y.total_cmp(&b.y)).then(a.x.total_cmp(&b.x)));
    let mut kept: Vec<Keypoint> = Vec::new();
    for p in order {
        if kept.iter().all(|q| (p.x - q.x).powi(2) + (p.y - q.y).powi(2) >= r * r) {
            kept.push(p);
        }
    }
    kept
}
