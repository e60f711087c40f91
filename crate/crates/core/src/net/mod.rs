//! The descriptor network.
//!
//! Reference topology for a square `S×S` patch (channel counts from
//! [`ArchSpec::widths`], defaults `[4, 8, 16, 32]`):
//!
//! ```text
//! patch ─ conv3×3 1→4 ─ norm ─ relu ──────────────────────────────┐ f1 (S)
//!        └ conv3×3 4→8 ─ norm ─ relu ─────────────────────────────┤ f2 (S)
//!          └ pool/2 ─ conv3×3 8→16 ─ norm ─ relu ─────── up×2 ────┤ f3 (S/2)
//!                     └ pool/2 ─ conv3×3 16→32 ─ norm ─ relu up×4 ┤ f4 (S/4)
//!                                                                 concat (60)
//!                                          conv1×1 60→32 ─ L2 normalise ─ D
//! ```
//!
//! Everything is generic over [`Real`] so that gradients can be checked in
//! `f64` while training runs in `f32`.

mod checkpoint;
mod flops;
pub mod layers;

use rand::Rng;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use flops::{count_flops, FlopBreakdown};

use crate::error::{Error, Result};
use crate::imgproc::bilinear_unchecked;
use crate::patches::Patch;
use crate::real::Real;
use layers::{MacCounter, UpTaps};

const NORM_EPS: f64 = 1e-5;
const ZERO_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    None,
    /// Per-patch, per-channel mean/variance normalisation.
    Instance,
    /// [`NormKind::Instance`] followed by a learnable per-channel affine.
    InstanceAffine,
}

impl NormKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NormKind::None => "none",
            NormKind::Instance => "instance",
            NormKind::InstanceAffine => "instance_affine",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormKind::None),
            "instance" => Ok(NormKind::Instance),
            "instance_affine" | "affine" => Ok(NormKind::InstanceAffine),
            o => Err(Error::Config(format!("unknown normalisation `{o}`"))),
        }
    }
}

/// Architecture table. Stage widths and the output dimension are the only
/// free choices; the topology is fixed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub widths: [usize; 4],
    pub out_dim: usize,
    pub norm: NormKind,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            widths: [4, 8, 16, 32],
            out_dim: 32,
            norm: NormKind::Instance,
        }
    }
}

/// Layer names in forward order.
pub const LAYER_NAMES: [&str; 5] = ["conv1", "conv2", "conv3", "conv4", "fuse"];

impl ArchSpec {
    /// `(cin, cout, k)` per layer.
    pub fn layer_shapes(&self) -> [(usize, usize, usize); 5] {
        let w = self.widths;
        [
            (1, w[0], 3),
            (w[0], w[1], 3),
            (w[1], w[2], 3),
            (w[2], w[3], 3),
            (w.iter().sum(), self.out_dim, 1),
        ]
    }

    /// Expected `(name, dims)` of every stored tensor, in order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, (cin, cout, k)) in self.layer_shapes().into_iter().enumerate() {
            let name = LAYER_NAMES[i];
            out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
            if i < 4 && self.norm == NormKind::InstanceAffine {
                out.push((format!("{name}.gamma"), vec![cout]));
                out.push((format!("{name}.beta"), vec![cout]));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensor_shapes()
            .iter()
            .map(|(_, d)| d.iter().product::<usize>())
            .sum()
    }

    pub fn to_text(&self) -> String {
        let w = self.widths;
        format!(
            "widths={},{},{},{};out={};norm={}",
            w[0],
            w[1],
            w[2],
            w[3],
            self.out_dim,
            self.norm.as_str()
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = ArchSpec::default();
        for part in text.split(';').filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad arch field `{part}`")))?;
            match k {
                "widths" => {
                    let ws: Vec<usize> = v
                        .split(',')
                        .map(|s| s.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::Checkpoint(format!("bad widths `{v}`")))?;
                    spec.widths = ws
                        .try_into()
                        .map_err(|_| Error::Checkpoint(format!("need 4 widths, got `{v}`")))?;
                }
                "out" => {
                    spec.out_dim = v
                        .parse()
                        .map_err(|_| Error::Checkpoint(format!("bad out dim `{v}`")))?
                }
                "norm" => spec.norm = NormKind::parse(v)?,
                o => return Err(Error::Checkpoint(format!("unknown arch field `{o}`"))),
            }
        }
        Ok(spec)
    }
}

/// A named parameter tensor with its gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(name: impl Into<String>, dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            name: name.into(),
            dims,
            data: vec![T::zero(); n],
            grad: vec![T::zero(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerSlots {
    weight: usize,
    bias: usize,
    affine: Option<(usize, usize)>,
}

/// All network weights with per-parameter gradient slots.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    arch: ArchSpec,
    tensors: Vec<Tensor<T>>,
}

/// Per-parameter gradients, laid out like the owning [`ParamSet`].
pub type Gradients<T> = Vec<Vec<T>>;

impl<T: Real> ParamSet<T> {
    /// Zero-initialised parameters (affine scales set to 1).
    pub fn zeros(arch: &ArchSpec) -> Self {
        let tensors = arch
            .tensor_shapes()
            .into_iter()
            .map(|(name, dims)| {
                let mut t = Tensor::zeros(name.clone(), dims);
                if name.ends_with(".gamma") {
                    t.data.fill(T::one());
                }
                t
            })
            .collect();
        Self {
            arch: arch.clone(),
            tensors,
        }
    }

    pub(crate) fn from_tensors(arch: ArchSpec, tensors: Vec<Tensor<T>>) -> Self {
        Self { arch, tensors }
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad.fill(T::zero());
        }
    }

    /// Empty gradient buffers shaped like the parameters.
    pub fn zero_gradients(&self) -> Gradients<T> {
        self.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect()
    }

    /// `grad += scale · g` for every parameter.
    pub fn accumulate(&mut self, g: &Gradients<T>, scale: T) {
        for (t, gi) in self.tensors.iter_mut().zip(g) {
            for (a, &b) in t.grad.iter_mut().zip(gi) {
                *a += scale * b;
            }
        }
    }

    /// Flattened view of parameter `i` across all tensors.
    pub fn get_flat(&self, mut i: usize) -> T {
        for t in &self.tensors {
            if i < t.len() {
                return t.data[i];
            }
            i -= t.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set_flat(&mut self, mut i: usize, v: T) {
        for t in &mut self.tensors {
            if i < t.len() {
                t.data[i] = v;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index out of range")
    }

    pub fn grad_flat(&self, mut i: usize) -> T {
        for t in &self.tensors {
            if i < t.len() {
                return t.grad[i];
            }
            i -= t.len();
        }
        panic!("parameter index out of range")
    }

    /// Name of the tensor holding flat parameter `i`.
    pub fn name_of_flat(&self, mut i: usize) -> &str {
        for t in &self.tensors {
            if i < t.len() {
                return &t.name;
            }
            i -= t.len();
        }
        panic!("parameter index out of range")
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    dims: t.dims.clone(),
                    data: t.data.iter().map(|v| U::lit(v.as_f64())).collect(),
                    grad: t.grad.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    fn slots(&self) -> [LayerSlots; 5] {
        let affine = self.arch.norm == NormKind::InstanceAffine;
        let mut idx = 0;
        let mut out = [LayerSlots {
            weight: 0,
            bias: 0,
            affine: None,
        }; 5];
        for (l, slot) in out.iter_mut().enumerate() {
            slot.weight = idx;
            slot.bias = idx + 1;
            idx += 2;
            if l < 4 && affine {
                slot.affine = Some((idx, idx + 1));
                idx += 2;
            }
        }
        out
    }
}

/// Reference architecture with Kaiming-uniform weights and zero biases.
pub fn init_params<R: Rng>(arch: &ArchSpec, rng: &mut R) -> ParamSet<f32> {
    let mut p = ParamSet::<f32>::zeros(arch);
    for t in p.tensors.iter_mut().filter(|t| t.name.ends_with(".weight")) {
        let fan_in = t.dims[1] * t.dims[2] * t.dims[3];
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        for v in t.data.iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
    }
    p
}

/// Dense per-pixel unit descriptors for one patch, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorMap<T> {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    /// `dim × height × width`.
    pub data: Vec<T>,
    pub origin: (usize, usize),
}

impl<T: Real> DescriptorMap<T> {
    pub fn new(width: usize, height: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * dim {
            return Err(Error::SizeMismatch(format!(
                "descriptor map {width}x{height}x{dim} needs {} values, got {}",
                width * height * dim,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            dim,
            data,
            origin: (0, 0),
        })
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.width * self.height
    }

    /// Descriptor at integer pixel `(x, y)`.
    pub fn at(&self, x: usize, y: usize) -> Vec<T> {
        let p = y * self.width + x;
        (0..self.dim).map(|c| self.data[c * self.plane() + p]).collect()
    }
}

/// Unit-norm descriptor of one keypoint.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointDescriptor<T>(pub Vec<T>);

impl<T: Real> KeypointDescriptor<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn norm(&self) -> T {
        self.0.iter().map(|&v| v * v).sum::<T>().sqrt()
    }
}

/// Bilinear blend of the four neighbouring descriptors, re-normalised.
pub fn sample_descriptor<T: Real>(map: &DescriptorMap<T>, x: T, y: T) -> Result<KeypointDescriptor<T>> {
    let maxx = T::lit((map.width - 1) as f64);
    let maxy = T::lit((map.height - 1) as f64);
    if !(x >= T::zero() && x <= maxx && y >= T::zero() && y <= maxy) {
        return Err(Error::OutOfBounds {
            x: x.as_f64(),
            y: y.as_f64(),
            width: map.width,
            height: map.height,
        });
    }
    Ok(KeypointDescriptor(sample_descriptor_raw(map, x, y).0))
}

/// Values plus the pre-normalisation blend and its norm, for backward.
pub(crate) fn sample_descriptor_raw<T: Real>(map: &DescriptorMap<T>, x: T, y: T) -> (Vec<T>, Vec<T>, T) {
    let plane = map.plane();
    let blend: Vec<T> = (0..map.dim)
        .map(|c| bilinear_unchecked(&map.data[c * plane..(c + 1) * plane], map.width, map.height, x, y))
        .collect();
    let (unit, n) = l2_normalize(&blend);
    (unit, blend, n)
}

pub(crate) fn l2_normalize<T: Real>(v: &[T]) -> (Vec<T>, T) {
    let n = v.iter().map(|&a| a * a).sum::<T>().sqrt();
    if n < T::lit(ZERO_NORM) {
        let mut e = vec![T::zero(); v.len()];
        e[0] = T::one();
        return (e, n);
    }
    (v.iter().map(|&a| a / n).collect(), n)
}

#[derive(Clone, Debug)]
struct StageCache<T> {
    input: Vec<T>,
    side: usize,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    /// Post-activation output.
    act: Vec<T>,
}

/// Retained activations of one forward pass (the backward tape).
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    side: usize,
    stages: Vec<StageCache<T>>,
    concat: Vec<T>,
    unit: Vec<T>,
    norms: Vec<T>,
}

#[derive(Default)]
struct Scratch<T> {
    tmp: Vec<T>,
}

impl<T: Real> ParamSet<T> {
    fn check_side(side: usize) -> Result<()> {
        if side == 0 || !side.is_multiple_of(4) {
            return Err(Error::InvalidArgument(format!(
                "patch side {side} is not a positive multiple of 4"
            )));
        }
        Ok(())
    }

    fn stage_forward(
        &self,
        layer: usize,
        input: Vec<T>,
        side: usize,
        slots: &LayerSlots,
        counter: Option<&mut MacCounter>,
    ) -> StageCache<T> {
        let (cin, cout, k) = self.arch.layer_shapes()[layer];
        let plane = side * side;
        let mut y = vec![T::zero(); cout * plane];
        conv2d_forward_dispatch(
            &input,
            cin,
            side,
            &self.tensors[slots.weight].data,
            &self.tensors[slots.bias].data,
            cout,
            k,
            &mut y,
            counter,
        );
        let (xhat, inv_std) = match self.arch.norm {
            NormKind::None => (y, Vec::new()),
            _ => {
                let mut xh = vec![T::zero(); cout * plane];
                let inv = layers::instance_norm_forward(&y, cout, plane, T::lit(NORM_EPS), &mut xh);
                (xh, inv)
            }
        };
        let mut act = xhat.clone();
        if let Some((g, b)) = slots.affine {
            let (gamma, beta) = (&self.tensors[g].data, &self.tensors[b].data);
            for c in 0..cout {
                for v in &mut act[c * plane..(c + 1) * plane] {
                    *v = gamma[c] * *v + beta[c];
                }
            }
        }
        for v in act.iter_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        StageCache {
            input,
            side,
            xhat,
            inv_std,
            act,
        }
    }

    fn stage_backward(&self, layer: usize, cache: &StageCache<T>, mut d_act: Vec<T>, slots: &LayerSlots, grads: &mut Gradients<T>, want_input: bool) -> Option<Vec<T>> {
        let (cin, cout, k) = self.arch.layer_shapes()[layer];
        let side = cache.side;
        let plane = side * side;
        for (g, &a) in d_act.iter_mut().zip(&cache.act) {
            if a <= T::zero() {
                *g = T::zero();
            }
        }
        // d_act now holds dL/d(affine output)
        let d_norm_out = d_act;
        let mut dxhat = d_norm_out;
        if let Some((gi, bi)) = slots.affine {
            let gamma = &self.tensors[gi].data;
            for c in 0..cout {
                let r = c * plane..(c + 1) * plane;
                let g = &dxhat[r.clone()];
                let xh = &cache.xhat[r.clone()];
                let dgamma: T = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                let dbeta: T = g.iter().copied().sum();
                grads[gi][c] += dgamma;
                grads[bi][c] += dbeta;
                for v in &mut dxhat[r] {
                    *v *= gamma[c];
                }
            }
        }
        let dy = match self.arch.norm {
            NormKind::None => dxhat,
            _ => {
                let mut dy = vec![T::zero(); cout * plane];
                layers::instance_norm_backward(&cache.xhat, &cache.inv_std, cout, plane, &dxhat, &mut dy);
                dy
            }
        };
        let mut dinput = want_input.then(|| vec![T::zero(); cin * plane]);
        let (wslot, bslot) = (slots.weight, slots.bias);
        let (gw, gb) = two_mut(grads, wslot, bslot);
        layers::conv2d_backward(
            &cache.input,
            cin,
            side,
            side,
            &self.tensors[wslot].data,
            cout,
            k,
            &dy,
            gw,
            gb,
            dinput.as_deref_mut(),
        );
        dinput
    }

    fn forward_impl(&self, pixels: &[T], side: usize, mut counter: Option<&mut MacCounter>) -> Result<(DescriptorMap<T>, ForwardCache<T>)> {
        Self::check_side(side)?;
        if pixels.len() != side * side {
            return Err(Error::SizeMismatch(format!(
                "patch has {} pixels, expected {}",
                pixels.len(),
                side * side
            )));
        }
        let slots = self.slots();
        let w = self.arch.widths;
        let (s1, s2, s4) = (side, side / 2, side / 4);
        let st1 = self.stage_forward(0, pixels.to_vec(), s1, &slots[0], counter.as_deref_mut());
        let st2 = self.stage_forward(1, st1.act.clone(), s1, &slots[1], counter.as_deref_mut());
        let mut p2 = vec![T::zero(); w[1] * s2 * s2];
        layers::avg_pool2_forward(&st2.act, w[1], s1, s1, &mut p2);
        let st3 = self.stage_forward(2, p2, s2, &slots[2], counter.as_deref_mut());
        let mut p3 = vec![T::zero(); w[2] * s4 * s4];
        layers::avg_pool2_forward(&st3.act, w[2], s2, s2, &mut p3);
        let st4 = self.stage_forward(3, p3, s4, &slots[3], counter.as_deref_mut());

        let plane = side * side;
        let cat_ch: usize = w.iter().sum();
        let mut concat = vec![T::zero(); cat_ch * plane];
        let mut scratch = Scratch::<T>::default();
        let mut off = 0;
        concat[..w[0] * plane].copy_from_slice(&st1.act);
        off += w[0] * plane;
        concat[off..off + w[1] * plane].copy_from_slice(&st2.act);
        off += w[1] * plane;
        let taps2 = UpTaps::<T>::new(s2, 2);
        layers::upsample_forward(&st3.act, w[2], s2, &taps2, &mut concat[off..off + w[2] * plane], &mut scratch.tmp);
        off += w[2] * plane;
        let taps4 = UpTaps::<T>::new(s4, 4);
        layers::upsample_forward(&st4.act, w[3], s4, &taps4, &mut concat[off..off + w[3] * plane], &mut scratch.tmp);

        let dim = self.arch.out_dim;
        let mut z = vec![T::zero(); dim * plane];
        conv2d_forward_dispatch(
            &concat,
            cat_ch,
            side,
            &self.tensors[slots[4].weight].data,
            &self.tensors[slots[4].bias].data,
            dim,
            1,
            &mut z,
            counter,
        );
        // per-pixel L2 normalisation across channels
        let mut norms = vec![T::zero(); plane];
        for c in 0..dim {
            for (n, &v) in norms.iter_mut().zip(&z[c * plane..(c + 1) * plane]) {
                *n += v * v;
            }
        }
        for n in norms.iter_mut() {
            *n = n.sqrt();
        }
        let mut unit = z;
        for c in 0..dim {
            for (p, v) in unit[c * plane..(c + 1) * plane].iter_mut().enumerate() {
                let n = norms[p];
                *v = if n < T::lit(ZERO_NORM) {
                    if c == 0 {
                        T::one()
                    } else {
                        T::zero()
                    }
                } else {
                    *v / n
                };
            }
        }
        let map = DescriptorMap {
            width: side,
            height: side,
            dim,
            data: unit.clone(),
            origin: (0, 0),
        };
        let cache = ForwardCache {
            side,
            stages: vec![st1, st2, st3, st4],
            concat,
            unit,
            norms,
        };
        Ok((map, cache))
    }

    /// Forward pass over raw pixels of a square patch.
    pub fn forward_pixels(&self, pixels: &[T], side: usize) -> Result<(DescriptorMap<T>, ForwardCache<T>)> {
        self.forward_impl(pixels, side, None)
    }

    /// Forward pass with a multiply-accumulate counter attached.
    pub fn forward_counted(&self, pixels: &[T], side: usize, counter: &mut MacCounter) -> Result<DescriptorMap<T>> {
        Ok(self.forward_impl(pixels, side, Some(counter))?.0)
    }

    /// Descriptor map of a patch (values only).
    pub fn forward(&self, patch: &Patch) -> Result<DescriptorMap<T>> {
        Ok(self.forward_with_cache(patch)?.0)
    }

    pub fn forward_with_cache(&self, patch: &Patch) -> Result<(DescriptorMap<T>, ForwardCache<T>)> {
        if patch.pixels.width() != patch.pixels.height() {
            return Err(Error::InvalidArgument("patch must be square".into()));
        }
        let px: Vec<T> = patch.pixels.data().iter().map(|&v| T::of_f32(v)).collect();
        let (mut map, cache) = self.forward_impl(&px, patch.side(), None)?;
        map.origin = (patch.origin_x, patch.origin_y);
        Ok((map, cache))
    }

    /// Reverse-mode pass: accumulates `dL/dθ` into `grads` given `dL/dD`.
    pub fn backward_into(&self, cache: &ForwardCache<T>, d_map: &[T], grads: &mut Gradients<T>) -> Result<()> {
        let side = cache.side;
        let plane = side * side;
        let dim = self.arch.out_dim;
        if d_map.len() != dim * plane || cache.stages.len() != 4 || grads.len() != self.tensors.len() {
            return Err(Error::SizeMismatch("backward tape does not match parameters".into()));
        }
        let slots = self.slots();
        let w = self.arch.widths;
        let (s2, s4) = (side / 2, side / 4);

        // L2 normalisation
        let mut dz = vec![T::zero(); dim * plane];
        for p in 0..plane {
            let n = cache.norms[p];
            if n < T::lit(ZERO_NORM) {
                continue;
            }
            let mut proj = T::zero();
            for c in 0..dim {
                proj += cache.unit[c * plane + p] * d_map[c * plane + p];
            }
            for c in 0..dim {
                let i = c * plane + p;
                dz[i] = (d_map[i] - cache.unit[i] * proj) / n;
            }
        }
        // fuse 1×1
        let cat_ch: usize = w.iter().sum();
        let mut dcat = vec![T::zero(); cat_ch * plane];
        {
            let (gw, gb) = two_mut(grads, slots[4].weight, slots[4].bias);
            layers::conv2d_backward(&cache.concat, cat_ch, side, side, &self.tensors[slots[4].weight].data, dim, 1, &dz, gw, gb, Some(&mut dcat));
        }
        let mut scratch = Scratch::<T>::default();
        let o1 = w[0] * plane;
        let o2 = o1 + w[1] * plane;
        let o3 = o2 + w[2] * plane;
        let mut d_f4 = vec![T::zero(); w[3] * s4 * s4];
        let taps4 = UpTaps::<T>::new(s4, 4);
        layers::upsample_backward(&dcat[o3..], w[3], s4, &taps4, &mut d_f4, &mut scratch.tmp);
        let d_p3 = self.stage_backward(3, &cache.stages[3], d_f4, &slots[3], grads, true).unwrap();

        let mut d_f3 = vec![T::zero(); w[2] * s2 * s2];
        let taps2 = UpTaps::<T>::new(s2, 2);
        layers::upsample_backward(&dcat[o2..o3], w[2], s2, &taps2, &mut d_f3, &mut scratch.tmp);
        layers::avg_pool2_backward(&d_p3, w[2], s2, s2, &mut d_f3);
        let d_p2 = self.stage_backward(2, &cache.stages[2], d_f3, &slots[2], grads, true).unwrap();

        let mut d_f2 = dcat[o1..o2].to_vec();
        layers::avg_pool2_backward(&d_p2, w[1], side, side, &mut d_f2);
        let d_f1_b = self.stage_backward(1, &cache.stages[1], d_f2, &slots[1], grads, true).unwrap();

        let mut d_f1 = dcat[..o1].to_vec();
        for (a, b) in d_f1.iter_mut().zip(d_f1_b) {
            *a += b;
        }
        self.stage_backward(0, &cache.stages[0], d_f1, &slots[0], grads, false);
        Ok(())
    }

    /// Reverse-mode pass accumulating directly into the parameter gradient
    /// slots (`+=`).
    pub fn backward(&mut self, cache: &ForwardCache<T>, d_map: &[T]) -> Result<()> {
        let mut g = self.zero_gradients();
        self.backward_into(cache, d_map, &mut g)?;
        self.accumulate(&g, T::one());
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn conv2d_forward_dispatch<T: Real>(
    input: &[T],
    cin: usize,
    side: usize,
    weight: &[T],
    bias: &[T],
    cout: usize,
    k: usize,
    out: &mut [T],
    counter: Option<&mut MacCounter>,
) {
    layers::conv2d_forward(input, cin, side, side, weight, bias, cout, k, out, counter);
}

fn two_mut<T>(v: &mut [Vec<T>], a: usize, b: usize) -> (&mut [T], &mut [T]) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgproc::Image;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_counts() {
        let arch = ArchSpec::default();
        assert_eq!(arch.param_count(), 8096);
        let per_layer: Vec<usize> = arch
            .layer_shapes()
            .iter()
            .map(|&(ci, co, k)| k * k * ci * co + co)
            .collect();
        assert_eq!(per_layer, vec![40, 296, 1168, 4640, 1952]);
        let affine = ArchSpec {
            norm: NormKind::InstanceAffine,
            ..ArchSpec::default()
        };
        assert_eq!(affine.param_count(), 8216);
    }

    #[test]
    fn init_is_seeded() {
        let arch = ArchSpec::default();
        let a = init_params(&arch, &mut ChaCha8Rng::seed_from_u64(1));
        let b = init_params(&arch, &mut ChaCha8Rng::seed_from_u64(1));
        let c = init_params(&arch, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.param_count(), 8096);
        assert!(a.tensors().iter().filter(|t| t.name.ends_with(".bias")).all(|t| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn arch_text_roundtrip() {
        let a = ArchSpec {
            widths: [2, 4, 6, 8],
            out_dim: 16,
            norm: NormKind::InstanceAffine,
        };
        assert_eq!(ArchSpec::parse(&a.to_text()).unwrap(), a);
        assert!(ArchSpec::parse("widths=1,2").is_err());
    }

    #[test]
    fn forward_rejects_bad_side() {
        let p = init_params(&ArchSpec::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(p.forward_pixels(&[0.0; 36], 6).is_err());
        let patch = Patch {
            pixels: Image::filled(8, 4, 0.0),
            origin_x: 0,
            origin_y: 0,
            kp_local_x: 0.0,
            kp_local_y: 0.0,
        };
        assert!(p.forward(&patch).is_err());
    }

    #[test]
    fn zero_norm_maps_to_fixed_unit() {
        let (u, n) = l2_normalize(&[0.0f64; 4]);
        assert_eq!(n, 0.0);
        assert_eq!(u, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn sampled_descriptor_midpoint() {
        let mut data = vec![0.0f64; 2 * 2];
        // pixel (0,0) = e0, pixel (1,0) = e1
        data[0] = 1.0;
        data[2 + 1] = 1.0;
        let map = DescriptorMap::new(2, 1, 2, data).unwrap();
        let d = sample_descriptor(&map, 0.5, 0.0).unwrap();
        let r = 0.5f64.sqrt();
        assert!((d.0[0] - r).abs() < 1e-15 && (d.0[1] - r).abs() < 1e-15);
        assert_eq!(sample_descriptor(&map, 1.0, 0.0).unwrap().0, vec![0.0, 1.0]);
        assert!(sample_descriptor(&map, 1.5, 0.0).is_err());
    }
}
