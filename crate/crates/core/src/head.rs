//! Reverse-mode graph over the matching operations.
//!
//! Leaves are dense descriptor maps; every other node is produced by one
//! operation and stores its value flattened. [`Graph::backward`] returns
//! `∂L/∂D` for every leaf, which the network then propagates to parameters.

use crate::losses::{masked_mse, mhm_mask, peaky_terms, PROB_FLOOR};
use crate::matching::{argmax_index, bilinear_taps, clamp_point, soft_weights, SimilarityMap};
use crate::net::{l2_normalize, DescriptorMap};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LeafId(pub usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Const,
    SampleDesc {
        leaf: usize,
        pt: NodeId,
        clamped: (bool, bool),
        norm: T,
    },
    Similarity {
        leaf: usize,
        vec: NodeId,
    },
    SoftArgmax {
        sim: NodeId,
        weights: Vec<T>,
        /// `(x0, y0, rx, ry)`
        geom: (usize, usize, usize, usize),
        temperature: T,
    },
    Offset {
        pt: NodeId,
    },
    Distance {
        a: NodeId,
        b: NodeId,
    },
    Peaky {
        sim: NodeId,
        weights: Vec<T>,
        dists: Vec<T>,
        /// `(x0, y0, nw, nh)`
        geom: (usize, usize, usize, usize),
        t_det: T,
        n2: T,
    },
    Mse {
        a: NodeId,
        b: NodeId,
        mask: Option<Vec<bool>>,
        count: usize,
    },
    ProbMap {
        sim: NodeId,
        t: T,
    },
    SampleScalar {
        grid: NodeId,
        pt: NodeId,
        clamped: (bool, bool),
    },
    NegLnFloor {
        x: NodeId,
    },
    Scale {
        x: NodeId,
        k: T,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    value: Vec<T>,
    /// Grid shape for map-valued nodes.
    shape: (usize, usize),
}

/// Tape of one loss evaluation.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    leaves: Vec<DescriptorMap<T>>,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            leaves: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub fn add_leaf(&mut self, map: DescriptorMap<T>) -> LeafId {
        self.leaves.push(map);
        LeafId(self.leaves.len() - 1)
    }

    pub fn leaf(&self, id: LeafId) -> &DescriptorMap<T> {
        &self.leaves[id.0]
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    fn push(&mut self, op: Op<T>, value: Vec<T>, shape: (usize, usize)) -> NodeId {
        self.nodes.push(Node { op, value, shape });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value[0]
    }

    pub fn point(&self, id: NodeId) -> (T, T) {
        let v = &self.nodes[id.0].value;
        (v[0], v[1])
    }

    /// Map-valued node as a similarity map.
    pub fn grid(&self, id: NodeId) -> SimilarityMap<T> {
        let n = &self.nodes[id.0];
        SimilarityMap {
            width: n.shape.0,
            height: n.shape.1,
            data: n.value.clone(),
        }
    }

    pub fn constant_point(&mut self, x: T, y: T) -> NodeId {
        self.push(Op::Const, vec![x, y], (0, 0))
    }

    pub fn constant_grid(&mut self, w: usize, h: usize, data: Vec<T>) -> NodeId {
        assert_eq!(data.len(), w * h);
        self.push(Op::Const, data, (w, h))
    }

    /// Unit descriptor bilinearly sampled from a leaf at point `pt`
    /// (clamped into the map).
    pub fn sample_desc(&mut self, leaf: LeafId, pt: NodeId) -> NodeId {
        let (px, py) = self.point(pt);
        let map = &self.leaves[leaf.0];
        let (x, y) = clamp_point(map.width, map.height, px, py);
        let plane = map.plane();
        let taps = bilinear_taps(map.width, map.height, x, y);
        let blend: Vec<T> = (0..map.dim)
            .map(|c| taps.iter().map(|&(i, w, _, _)| w * map.data[c * plane + i]).sum())
            .collect();
        let (unit, norm) = l2_normalize(&blend);
        self.push(
            Op::SampleDesc {
                leaf: leaf.0,
                pt,
                clamped: (x != px, y != py),
                norm,
            },
            unit,
            (0, 0),
        )
    }

    /// `C[p] = ⟨D[p], d⟩` over a leaf.
    pub fn similarity(&mut self, leaf: LeafId, vec: NodeId) -> NodeId {
        let map = &self.leaves[leaf.0];
        let d = &self.nodes[vec.0].value;
        assert_eq!(d.len(), map.dim);
        let plane = map.plane();
        let mut out = vec![T::zero(); plane];
        for (c, &dc) in d.iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(&map.data[c * plane..(c + 1) * plane]) {
                *o += v * dc;
            }
        }
        let shape = (map.width, map.height);
        self.push(Op::Similarity { leaf: leaf.0, vec }, out, shape)
    }

    /// Soft-argmax around the global argmax (the peak location is constant).
    pub fn soft_argmax(&mut self, sim: NodeId, window: usize, temperature: T) -> NodeId {
        let s = self.grid(sim);
        let i = argmax_index(&s.data);
        let center = (i % s.width, i / s.width);
        let (xy, weights, geom) = {
            let (p, w, geom) = soft_point(&s, center, window, temperature);
            (p, w, geom)
        };
        self.push(
            Op::SoftArgmax {
                sim,
                weights,
                geom,
                temperature,
            },
            vec![xy.0, xy.1],
            (0, 0),
        )
    }

    /// `pt + (dx, dy)`, used to move local coordinates into image space.
    pub fn offset(&mut self, pt: NodeId, dx: T, dy: T) -> NodeId {
        let (x, y) = self.point(pt);
        self.push(Op::Offset { pt }, vec![x + dx, y + dy], (0, 0))
    }

    pub fn distance(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = crate::losses::dist(self.point(a), self.point(b));
        self.push(Op::Distance { a, b }, vec![d], (0, 0))
    }

    /// Local peaky term around constant point `kp`.
    pub fn peaky(&mut self, sim: NodeId, kp: (T, T), n: usize, t_det: T) -> NodeId {
        let s = self.grid(sim);
        let (weights, dists, _) = peaky_terms(&s, kp, n, t_det);
        let geom = crate::losses::peaky_window(s.width, s.height, kp, n);
        let n2 = T::lit((n * n) as f64);
        let v: T = weights.iter().zip(&dists).map(|(&a, &b)| a * b).sum::<T>() / n2;
        self.push(
            Op::Peaky {
                sim,
                weights,
                dists,
                geom,
                t_det,
                n2,
            },
            vec![v],
            (0, 0),
        )
    }

    /// Mean squared difference of two map nodes; with `mask_tau` only pixels
    /// where either map reaches the threshold count.
    pub fn mse(&mut self, a: NodeId, b: NodeId, mask_tau: Option<T>) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), vb.len());
        let (mask, v, count) = match mask_tau {
            Some(tau) => {
                let m = mhm_mask(va, vb, tau);
                let (v, k) = masked_mse(va, vb, &m);
                (Some(m), v, k)
            }
            None => {
                let s: T = va.iter().zip(vb).map(|(&x, &y)| (x - y) * (x - y)).sum();
                (None, s / T::lit(va.len() as f64), va.len())
            }
        };
        self.push(Op::Mse { a, b, mask, count }, vec![v], (0, 0))
    }

    /// Pixels that entered a masked [`Graph::mse`].
    pub fn mse_count(&self, id: NodeId) -> usize {
        match &self.nodes[id.0].op {
            Op::Mse { count, .. } => *count,
            _ => panic!("not an mse node"),
        }
    }

    /// `softmax((C − 1)/t)`.
    pub fn prob_map(&mut self, sim: NodeId, t: T) -> NodeId {
        let s = self.grid(sim);
        let p = crate::matching::probability_map(&s, t);
        self.push(Op::ProbMap { sim, t }, p.data, (s.width, s.height))
    }

    /// Bilinear sample of a map node, coordinates clamped into the grid.
    pub fn sample_scalar(&mut self, grid: NodeId, pt: NodeId) -> NodeId {
        let (px, py) = self.point(pt);
        let (w, h) = self.nodes[grid.0].shape;
        let (x, y) = clamp_point(w, h, px, py);
        let g = &self.nodes[grid.0].value;
        let v: T = bilinear_taps(w, h, x, y).iter().map(|&(i, wt, _, _)| wt * g[i]).sum();
        self.push(
            Op::SampleScalar {
                grid,
                pt,
                clamped: (x != px, y != py),
            },
            vec![v],
            (0, 0),
        )
    }

    /// `−ln(max(x, 1e-12))`.
    pub fn neg_ln_floor(&mut self, x: NodeId) -> NodeId {
        let v = self.scalar(x).max(T::lit(PROB_FLOOR));
        self.push(Op::NegLnFloor { x }, vec![-v.ln()], (0, 0))
    }

    pub fn scale(&mut self, x: NodeId, k: T) -> NodeId {
        let v: Vec<T> = self.nodes[x.0].value.iter().map(|&a| a * k).collect();
        let shape = self.nodes[x.0].shape;
        self.push(Op::Scale { x, k }, v, shape)
    }

    /// Reverse sweep from scalar `seeds` (`∂L/∂node`). Returns `∂L/∂leaf`.
    pub fn backward(&self, seeds: &[(NodeId, T)]) -> Vec<Vec<T>> {
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        let mut leaf_grads: Vec<Vec<T>> = self.leaves.iter().map(|l| vec![T::zero(); l.data.len()]).collect();
        for &(id, s) in seeds {
            let g = grads[id.0].get_or_insert_with(|| vec![T::zero(); self.nodes[id.0].value.len()]);
            g[0] += s;
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::SampleDesc {
                    leaf,
                    pt,
                    clamped,
                    norm,
                } => {
                    let map = &self.leaves[*leaf];
                    if *norm < T::lit(1e-12) {
                        continue;
                    }
                    let u = &node.value;
                    let proj: T = u.iter().zip(&g).map(|(&a, &b)| a * b).sum();
                    let dblend: Vec<T> = u.iter().zip(&g).map(|(&ui, &gi)| (gi - ui * proj) / *norm).collect();
                    let (px, py) = self.point(*pt);
                    let (x, y) = clamp_point(map.width, map.height, px, py);
                    let taps = bilinear_taps(map.width, map.height, x, y);
                    let plane = map.plane();
                    let lg = &mut leaf_grads[*leaf];
                    let (mut gx, mut gy) = (T::zero(), T::zero());
                    for (c, &db) in dblend.iter().enumerate() {
                        for &(i, w, wx, wy) in &taps {
                            lg[c * plane + i] += w * db;
                            let v = map.data[c * plane + i];
                            gx += db * wx * v;
                            gy += db * wy * v;
                        }
                    }
                    if clamped.0 {
                        gx = T::zero();
                    }
                    if clamped.1 {
                        gy = T::zero();
                    }
                    add_to(&mut grads, &self.nodes, *pt, &[gx, gy]);
                }
                Op::Similarity { leaf, vec } => {
                    let map = &self.leaves[*leaf];
                    let plane = map.plane();
                    let d = &self.nodes[vec.0].value;
                    let mut dv = vec![T::zero(); map.dim];
                    let lg = &mut leaf_grads[*leaf];
                    for c in 0..map.dim {
                        let dc = d[c];
                        let col = &map.data[c * plane..(c + 1) * plane];
                        let lgc = &mut lg[c * plane..(c + 1) * plane];
                        let mut acc = T::zero();
                        for p in 0..plane {
                            lgc[p] += g[p] * dc;
                            acc += g[p] * col[p];
                        }
                        dv[c] = acc;
                    }
                    add_to(&mut grads, &self.nodes, *vec, &dv);
                }
                Op::SoftArgmax {
                    sim,
                    weights,
                    geom,
                    temperature,
                } => {
                    let (x0, y0, rx, ry) = *geom;
                    let (nw, nh) = (2 * rx + 1, 2 * ry + 1);
                    let (w, _) = self.nodes[sim.0].shape;
                    let cx = T::lit((x0 + rx) as f64);
                    let cy = T::lit((y0 + ry) as f64);
                    let ox = node.value[0] - cx;
                    let oy = node.value[1] - cy;
                    let mut ds = vec![T::zero(); self.nodes[sim.0].value.len()];
                    for r in 0..nh {
                        for c in 0..nw {
                            let wk = weights[r * nw + c];
                            let dx = T::lit(c as f64 - rx as f64) - ox;
                            let dy = T::lit(r as f64 - ry as f64) - oy;
                            ds[(y0 + r) * w + x0 + c] += wk * (g[0] * dx + g[1] * dy) / *temperature;
                        }
                    }
                    add_to(&mut grads, &self.nodes, *sim, &ds);
                }
                Op::Offset { pt } => add_to(&mut grads, &self.nodes, *pt, &g),
                Op::Distance { a, b } => {
                    let d = node.value[0];
                    if d > T::zero() {
                        let (pa, pb) = (self.point(*a), self.point(*b));
                        let ux = (pa.0 - pb.0) / d * g[0];
                        let uy = (pa.1 - pb.1) / d * g[0];
                        add_to(&mut grads, &self.nodes, *a, &[ux, uy]);
                        add_to(&mut grads, &self.nodes, *b, &[-ux, -uy]);
                    }
                }
                Op::Peaky {
                    sim,
                    weights,
                    dists,
                    geom,
                    t_det,
                    n2,
                } => {
                    let (x0, y0, nw, nh) = *geom;
                    let (w, _) = self.nodes[sim.0].shape;
                    let mean: T = weights.iter().zip(dists).map(|(&a, &b)| a * b).sum();
                    let mut ds = vec![T::zero(); self.nodes[sim.0].value.len()];
                    for r in 0..nh {
                        for c in 0..nw {
                            let k = r * nw + c;
                            ds[(y0 + r) * w + x0 + c] = g[0] * weights[k] * (dists[k] - mean) / (*t_det * *n2);
                        }
                    }
                    add_to(&mut grads, &self.nodes, *sim, &ds);
                }
                Op::Mse { a, b, mask, count } => {
                    if *count == 0 {
                        continue;
                    }
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let k = T::lit(2.0) * g[0] / T::lit(*count as f64);
                    let da: Vec<T> = va
                        .iter()
                        .zip(vb)
                        .enumerate()
                        .map(|(i, (&x, &y))| match mask {
                            Some(m) if !m[i] => T::zero(),
                            _ => k * (x - y),
                        })
                        .collect();
                    let db: Vec<T> = da.iter().map(|&v| -v).collect();
                    add_to(&mut grads, &self.nodes, *a, &da);
                    add_to(&mut grads, &self.nodes, *b, &db);
                }
                Op::ProbMap { sim, t } => {
                    let p = &node.value;
                    let gp: T = p.iter().zip(&g).map(|(&a, &b)| a * b).sum();
                    let ds: Vec<T> = p.iter().zip(&g).map(|(&pi, &gi)| pi * (gi - gp) / *t).collect();
                    add_to(&mut grads, &self.nodes, *sim, &ds);
                }
                Op::SampleScalar { grid, pt, clamped } => {
                    let (w, h) = self.nodes[grid.0].shape;
                    let (px, py) = self.point(*pt);
                    let (x, y) = clamp_point(w, h, px, py);
                    let gv = &self.nodes[grid.0].value;
                    let mut dg = vec![T::zero(); gv.len()];
                    let (mut gx, mut gy) = (T::zero(), T::zero());
                    for &(i, wt, wx, wy) in &bilinear_taps(w, h, x, y) {
                        dg[i] += wt * g[0];
                        gx += wx * gv[i] * g[0];
                        gy += wy * gv[i] * g[0];
                    }
                    if clamped.0 {
                        gx = T::zero();
                    }
                    if clamped.1 {
                        gy = T::zero();
                    }
                    add_to(&mut grads, &self.nodes, *grid, &dg);
                    add_to(&mut grads, &self.nodes, *pt, &[gx, gy]);
                }
                Op::NegLnFloor { x } => {
                    let v = self.scalar(*x);
                    if v > T::lit(PROB_FLOOR) {
                        add_to(&mut grads, &self.nodes, *x, &[-g[0] / v]);
                    }
                }
                Op::Scale { x, k } => {
                    let d: Vec<T> = g.iter().map(|&v| v * *k).collect();
                    add_to(&mut grads, &self.nodes, *x, &d);
                }
            }
        }
        leaf_grads
    }
}

fn add_to<T: Real>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], id: NodeId, g: &[T]) {
    if matches!(nodes[id.0].op, Op::Const) {
        return;
    }
    let slot = grads[id.0].get_or_insert_with(|| vec![T::zero(); nodes[id.0].value.len()]);
    for (a, &b) in slot.iter_mut().zip(g) {
        *a += b;
    }
}

/// Window bounds `(x0, y0, x1, y1)`.
type WindowGeom = (usize, usize, usize, usize);

/// Soft-argmax value plus normalised weights and window geometry.
fn soft_point<T: Real>(
    s: &SimilarityMap<T>,
    center: (usize, usize),
    window: usize,
    temperature: T,
) -> ((T, T), Vec<T>, WindowGeom) {
    let (mut w, z, geom) = soft_weights(s, center, window, temperature);
    let p = crate::matching::soft_argmax(s, center, window, temperature);
    for v in &mut w {
        *v /= z;
    }
    (p, w, geom)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(w: usize, h: usize, dim: usize, seed: u64) -> DescriptorMap<f64> {
        let mut s = seed;
        let data = (0..w * h * dim)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        DescriptorMap::new(w, h, dim, data).unwrap()
    }

    /// Scalar objective exercising every op.
    fn objective(a: &DescriptorMap<f64>, b: &DescriptorMap<f64>) -> (Graph<f64>, Vec<(NodeId, f64)>) {
        let mut g = Graph::new();
        let la = g.add_leaf(a.clone());
        let lb = g.add_leaf(b.clone());
        let pa = g.constant_point(3.3, 4.6);
        let pb = g.constant_point(4.2, 3.7);
        let da = g.sample_desc(la, pa);
        let db = g.sample_desc(lb, pb);
        let cab = g.similarity(lb, da);
        let cba = g.similarity(la, db);
        let m = g.soft_argmax(cab, 5, 0.3);
        let mo = g.offset(m, 2.0, -1.0);
        let po = g.offset(pb, 2.0, -1.0);
        let dist = g.distance(mo, po);
        let dm = g.sample_desc(lb, m);
        let cm = g.similarity(la, dm);
        let pk = g.peaky(cba, (3.3, 4.6), 5, 0.2);
        let t = g.constant_grid(8, 8, crate::losses::gaussian_target(8, 8, (3.3, 4.6), 2.0));
        let hm = g.mse(cba, t, None);
        let mh = g.mse(cba, cm, Some(-0.2));
        let p = g.prob_map(cab, 0.4);
        let sp = g.sample_scalar(p, pb);
        let nl = g.neg_ln_floor(sp);
        let half = g.scale(nl, 0.5);
        let seeds = vec![(dist, 1.0), (pk, 0.7), (hm, 1.3), (mh, 0.9), (half, 1.1)];
        (g, seeds)
    }

    fn total(a: &DescriptorMap<f64>, b: &DescriptorMap<f64>) -> f64 {
        let (g, seeds) = objective(a, b);
        seeds.iter().map(|&(n, w)| w * g.scalar(n)).sum()
    }

    #[test]
    fn graph_gradients_match_finite_differences() {
        let a = leaf(8, 8, 3, 1);
        let b = leaf(8, 8, 3, 2);
        let (g, seeds) = objective(&a, &b);
        let grads = g.backward(&seeds);
        let h = 1e-6;
        for (li, base) in [&a, &b].into_iter().enumerate() {
            for k in (0..base.data.len()).step_by(7) {
                let mut plus = base.clone();
                plus.data[k] += h;
                let mut minus = base.clone();
                minus.data[k] -= h;
                let (fp, fm) = if li == 0 {
                    (total(&plus, &b), total(&minus, &b))
                } else {
                    (total(&a, &plus), total(&a, &minus))
                };
                let fd = (fp - fm) / (2.0 * h);
                let an = grads[li][k];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "leaf {li} idx {k}: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn zero_seed_gives_zero_gradient() {
        let a = leaf(8, 8, 3, 1);
        let b = leaf(8, 8, 3, 2);
        let (g, seeds) = objective(&a, &b);
        let zero: Vec<_> = seeds.iter().map(|&(n, _)| (n, 0.0)).collect();
        assert!(g.backward(&zero).iter().flatten().all(|&v| v == 0.0));
    }
}
