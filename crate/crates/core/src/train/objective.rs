//! Per-item loss graphs and batch gradients.

use rayon::prelude::*;

use super::data::{PairItem, SequenceItem, TrainItem};
use crate::error::{Error, Result};
use crate::head::{Graph, LeafId, NodeId};
use crate::losses::{gaussian_target, FilterCounts, LossReport, LossTerms, LossWeights};
use crate::matching::{DEFAULT_PROB_TEMPERATURE, DEFAULT_SOFT_TEMPERATURE, DEFAULT_SOFT_WINDOW};
use crate::net::{ForwardCache, Gradients, ParamSet};
use crate::patches::Patch;
use crate::real::Real;

/// Hyperparameters of the loss graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub soft_window: usize,
    pub soft_temperature: f64,
    pub prob_temperature: f64,
    pub t_det: f64,
    pub peaky_n: usize,
    pub sigma: f64,
    /// Distance threshold of the consistency terms, pixels.
    pub tau: f64,
    /// Similarity threshold of the multi-frame heatmap mask.
    pub tau_sim: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            soft_window: DEFAULT_SOFT_WINDOW,
            soft_temperature: DEFAULT_SOFT_TEMPERATURE,
            prob_temperature: DEFAULT_PROB_TEMPERATURE,
            t_det: 0.1,
            peaky_n: 5,
            sigma: 2.0,
            tau: 5.0,
            tau_sim: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Rp = 0,
    Lpk = 1,
    Hm = 2,
    Desc = 3,
    Srp = 4,
    Mrp = 5,
    Mhm = 6,
}

pub const ALL_TERMS: [Term; 7] = [Term::Rp, Term::Lpk, Term::Hm, Term::Desc, Term::Srp, Term::Mrp, Term::Mhm];

impl Term {
    pub fn name(&self) -> &'static str {
        ["rp", "lpk", "hm", "desc", "srp", "mrp", "mhm"][*self as usize]
    }
}

#[derive(Clone, Copy, Debug)]
struct Part {
    term: Term,
    node: NodeId,
    coef: f64,
}

/// Forward state of one item: the head graph, the network caches of its
/// leaves, and the scalar parts making up each term.
pub struct ItemGraph<T> {
    pub graph: Graph<T>,
    caches: Vec<ForwardCache<T>>,
    parts: Vec<Part>,
    /// Averaging units contributed to each term.
    units: [usize; 7],
    counts: FilterCounts,
}

impl<T: Real> ItemGraph<T> {
    /// Unnormalised sum of the parts of each term.
    fn sums(&self) -> [f64; 7] {
        let mut s = [0.0; 7];
        for p in &self.parts {
            s[p.term as usize] += p.coef * self.graph.scalar(p.node).as_f64();
        }
        s
    }
}

struct Builder<'a, T> {
    params: &'a ParamSet<T>,
    cfg: &'a ObjectiveConfig,
    g: Graph<T>,
    caches: Vec<ForwardCache<T>>,
    parts: Vec<Part>,
    units: [usize; 7],
    counts: FilterCounts,
}

impl<'a, T: Real> Builder<'a, T> {
    fn new(params: &'a ParamSet<T>, cfg: &'a ObjectiveConfig) -> Self {
        Self {
            params,
            cfg,
            g: Graph::new(),
            caches: Vec::new(),
            parts: Vec::new(),
            units: [0; 7],
            counts: FilterCounts::default(),
        }
    }

    fn leaf(&mut self, patch: &Patch) -> Result<(LeafId, NodeId)> {
        let (map, cache) = self.params.forward_with_cache(patch)?;
        self.caches.push(cache);
        let id = self.g.add_leaf(map);
        let gt = self.g.constant_point(T::of_f32(patch.kp_local_x), T::of_f32(patch.kp_local_y));
        Ok((id, gt))
    }

    fn part(&mut self, term: Term, node: NodeId, coef: f64) {
        self.parts.push(Part { term, node, coef });
    }

    fn soft(&mut self, sim: NodeId) -> NodeId {
        self.g.soft_argmax(sim, self.cfg.soft_window, T::lit(self.cfg.soft_temperature))
    }

    /// The four supervised terms of one correspondence between two leaves.
    fn supervised(&mut self, (la, pa): (LeafId, NodeId), (lb, pb): (LeafId, NodeId)) {
        let c = self.cfg.clone();
        let g = &mut self.g;
        let da = g.sample_desc(la, pa);
        let db = g.sample_desc(lb, pb);
        let c_ab = g.similarity(lb, da);
        let c_ba = g.similarity(la, db);
        let gt_a = g.point(pa);
        let gt_b = g.point(pb);

        let mb = self.soft(c_ab);
        let ma = self.soft(c_ba);
        let d1 = self.g.distance(mb, pb);
        let d2 = self.g.distance(ma, pa);
        self.part(Term::Rp, d1, 1.0);
        self.part(Term::Rp, d2, 1.0);

        let t_det = T::lit(c.t_det);
        let k1 = self.g.peaky(c_ab, gt_b, c.peaky_n, t_det);
        let k2 = self.g.peaky(c_ba, gt_a, c.peaky_n, t_det);
        self.part(Term::Lpk, k1, 1.0);
        self.part(Term::Lpk, k2, 1.0);

        let sigma = T::lit(c.sigma);
        let (wb, hb) = (self.g.leaf(lb).width, self.g.leaf(lb).height);
        let (wa, ha) = (self.g.leaf(la).width, self.g.leaf(la).height);
        let tb = self.g.constant_grid(wb, hb, gaussian_target(wb, hb, gt_b, sigma));
        let ta = self.g.constant_grid(wa, ha, gaussian_target(wa, ha, gt_a, sigma));
        let h1 = self.g.mse(c_ab, tb, None);
        let h2 = self.g.mse(c_ba, ta, None);
        self.part(Term::Hm, h1, 1.0);
        self.part(Term::Hm, h2, 1.0);

        let t = T::lit(c.prob_temperature);
        let p_ab = self.g.prob_map(c_ab, t);
        let p_ba = self.g.prob_map(c_ba, t);
        let s1 = self.g.sample_scalar(p_ab, pb);
        let s2 = self.g.sample_scalar(p_ba, pa);
        let n1 = self.g.neg_ln_floor(s1);
        let n2 = self.g.neg_ln_floor(s2);
        self.part(Term::Desc, n1, 0.5);
        self.part(Term::Desc, n2, 0.5);

        for t in [Term::Rp, Term::Lpk, Term::Hm, Term::Desc] {
            self.units[t as usize] += 1;
        }
    }

    fn pair(&mut self, item: &PairItem) -> Result<()> {
        let a = self.leaf(&item.a)?;
        let b = self.leaf(&item.b)?;
        self.supervised(a, b);
        Ok(())
    }

    fn sequence(&mut self, item: &SequenceItem) -> Result<()> {
        let k = item.frames.len();
        if k < 3 {
            return Err(Error::EmptyInput(format!("sequence item spans {k} frames")));
        }
        let frames = item.frames.iter().map(|p| self.leaf(p)).collect::<Result<Vec<_>>>()?;
        for w in frames.windows(2) {
            self.supervised(w[0], w[1]);
        }
        self.single_consistency(item)?;
        self.multi_frame(&frames);
        Ok(())
    }

    fn single_consistency(&mut self, item: &SequenceItem) -> Result<()> {
        let (m, n) = (item.jitter_a.len(), item.jitter_b.len());
        if m < 2 && n < 2 {
            return Ok(());
        }
        let a = item.jitter_a.iter().map(|p| self.leaf(p)).collect::<Result<Vec<_>>>()?;
        let b = item.jitter_b.iter().map(|p| self.leaf(p)).collect::<Result<Vec<_>>>()?;
        let da: Vec<NodeId> = a.iter().map(|&(l, p)| self.g.sample_desc(l, p)).collect();
        let db: Vec<NodeId> = b.iter().map(|&(l, p)| self.g.sample_desc(l, p)).collect();
        let norm = 1.0 / (m + n) as f64;
        let tau = self.cfg.tau;
        let mut rows: Vec<Vec<NodeId>> = Vec::new();
        // estimates of the frame-0 point inside each frame-1 patch
        for (j, &(lb, _)) in b.iter().enumerate() {
            let ob = &item.jitter_b[j];
            let row = da
                .iter()
                .map(|&d| {
                    let c = self.g.similarity(lb, d);
                    let s = self.soft(c);
                    self.g.offset(s, T::lit(ob.origin_x as f64), T::lit(ob.origin_y as f64))
                })
                .collect();
            rows.push(row);
        }
        for (i, &(la, _)) in a.iter().enumerate() {
            let oa = &item.jitter_a[i];
            let row = db
                .iter()
                .map(|&d| {
                    let c = self.g.similarity(la, d);
                    let s = self.soft(c);
                    self.g.offset(s, T::lit(oa.origin_x as f64), T::lit(oa.origin_y as f64))
                })
                .collect();
            rows.push(row);
        }
        for row in rows {
            for w in row.windows(2) {
                let d = self.g.distance(w[0], w[1]);
                self.counts.srp_pairs += 1;
                if self.g.scalar(d).as_f64() <= tau {
                    self.part(Term::Srp, d, norm);
                } else {
                    self.counts.srp_filtered += 1;
                }
            }
        }
        self.units[Term::Srp as usize] += 1;
        Ok(())
    }

    fn multi_frame(&mut self, frames: &[(LeafId, NodeId)]) {
        let k = frames.len();
        let d0 = self.g.sample_desc(frames[0].0, frames[0].1);
        // chained: every hop re-samples the descriptor at the previous estimate
        let c = self.g.similarity(frames[1].0, d0);
        let mut e = self.soft(c);
        for i in 2..k {
            let d = self.g.sample_desc(frames[i - 1].0, e);
            let c = self.g.similarity(frames[i].0, d);
            e = self.soft(c);
        }
        let last = frames[k - 1].0;
        let c_direct = self.g.similarity(last, d0);
        let direct = self.soft(c_direct);
        let dist = self.g.distance(e, direct);
        self.counts.mrp_points += 1;
        if self.g.scalar(dist).as_f64() <= self.cfg.tau {
            self.part(Term::Mrp, dist, 1.0);
            self.units[Term::Mrp as usize] += 1;
        } else {
            self.counts.mrp_filtered += 1;
        }

        let tau_sim = T::lit(self.cfg.tau_sim);
        for i in 2..k {
            let c_first = self.g.similarity(frames[i].0, d0);
            let d_prev = self.g.sample_desc(frames[i - 1].0, frames[i - 1].1);
            let c_prev = self.g.similarity(frames[i].0, d_prev);
            let mse = self.g.mse(c_first, c_prev, Some(tau_sim));
            self.counts.mhm_maps += 1;
            if self.g.mse_count(mse) > 0 {
                self.part(Term::Mhm, mse, 1.0);
                self.units[Term::Mhm as usize] += 1;
            } else {
                self.counts.mhm_empty += 1;
            }
        }
    }

    fn finish(self) -> ItemGraph<T> {
        let mut counts = self.counts;
        counts.items = 1;
        ItemGraph {
            graph: self.g,
            caches: self.caches,
            parts: self.parts,
            units: self.units,
            counts,
        }
    }
}

/// Forward pass of one item through the network and the head graph.
pub fn build_item_graph<T: Real>(params: &ParamSet<T>, item: &TrainItem, cfg: &ObjectiveConfig) -> Result<ItemGraph<T>> {
    let mut b = Builder::new(params, cfg);
    match item {
        TrainItem::Pair(p) => b.pair(p)?,
        TrainItem::Sequence(s) => b.sequence(s)?,
    }
    Ok(b.finish())
}

/// Batch-level term values: each term is its summed parts divided by the
/// number of units contributing to it (0 when none do).
fn batch_terms<T: Real>(graphs: &[ItemGraph<T>]) -> (LossTerms, [usize; 7], FilterCounts) {
    let mut sums = [0.0; 7];
    let mut units = [0usize; 7];
    let mut counts = FilterCounts::default();
    for g in graphs {
        for (s, v) in sums.iter_mut().zip(g.sums()) {
            *s += v;
        }
        for (u, v) in units.iter_mut().zip(g.units) {
            *u += v;
        }
        counts.merge(&g.counts);
    }
    let mut vals = [0.0; 7];
    for t in 0..7 {
        if units[t] > 0 {
            vals[t] = sums[t] / units[t] as f64;
        }
    }
    let terms = LossTerms {
        rp: vals[0],
        lpk: vals[1],
        hm: vals[2],
        desc: vals[3],
        srp: vals[4],
        mrp: vals[5],
        mhm: vals[6],
    };
    (terms, units, counts)
}

/// Loss report of a batch, without gradients.
pub fn batch_loss<T: Real>(params: &ParamSet<T>, items: &[&TrainItem], cfg: &ObjectiveConfig, w: &LossWeights) -> Result<LossReport> {
    let graphs = items
        .par_iter()
        .map(|it| build_item_graph(params, it, cfg))
        .collect::<Result<Vec<_>>>()?;
    let (terms, _, counts) = batch_terms(&graphs);
    Ok(LossReport::new(terms, w, counts))
}

/// Loss report and `∂total/∂θ` of a batch. Items are differentiated in
/// parallel and reduced in item order.
pub fn batch_loss_and_grad<T: Real>(
    params: &ParamSet<T>,
    items: &[&TrainItem],
    cfg: &ObjectiveConfig,
    w: &LossWeights,
) -> Result<(LossReport, Gradients<T>)> {
    let graphs = items
        .par_iter()
        .map(|it| build_item_graph(params, it, cfg))
        .collect::<Result<Vec<_>>>()?;
    let (terms, units, counts) = batch_terms(&graphs);
    let report = LossReport::new(terms, w, counts);
    let weights = w.as_array();
    let per_item: Vec<Gradients<T>> = graphs
        .par_iter()
        .map(|ig| {
            let seeds: Vec<(NodeId, T)> = ig
                .parts
                .iter()
                .filter(|p| weights[p.term as usize] > 0.0)
                .map(|p| {
                    let t = p.term as usize;
                    (p.node, T::lit(weights[t] * p.coef / units[t] as f64))
                })
                .collect();
            let mut grads = params.zero_gradients();
            if seeds.is_empty() {
                return Ok(grads);
            }
            let leaf_grads = ig.graph.backward(&seeds);
            for (cache, lg) in ig.caches.iter().zip(&leaf_grads) {
                params.backward_into(cache, lg, &mut grads)?;
            }
            Ok(grads)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = params.zero_gradients();
    for g in &per_item {
        for (a, b) in total.iter_mut().zip(g) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
    Ok((report, total))
}
