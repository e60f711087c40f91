//! Channel-major (`C×H×W`) tensor kernels with hand-written backward passes.

use crate::real::Real;

/// Multiply-accumulate counter used by the instrumented forward pass. Counts
/// logical taps of a zero-padded convolution, padding included.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCounter {
    pub macs: u64,
}

#[inline]
fn axpy<T: Real>(acc: &mut [T], a: T, x: &[T]) {
    for (o, &v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Valid output range `[lo, hi)` along one axis for tap offset `d`.
#[inline]
fn tap_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo.min(n), hi.max(lo.min(n)))
}

/// `same`-padded k×k convolution, weights `[cout][cin][k][k]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<T: Real>(
    input: &[T],
    cin: usize,
    w: usize,
    h: usize,
    weight: &[T],
    bias: &[T],
    cout: usize,
    k: usize,
    out: &mut [T],
    mut counter: Option<&mut MacCounter>,
) {
    let plane = w * h;
    let pad = (k / 2) as isize;
    debug_assert_eq!(input.len(), cin * plane);
    debug_assert_eq!(out.len(), cout * plane);
    for co in 0..cout {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.fill(bias[co]);
        for ci in 0..cin {
            let src = &input[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y_lo, y_hi) = tap_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x_lo, x_hi) = tap_range(w, dx);
                    let wv = weight[((co * cin + ci) * k + ky) * k + kx];
                    if let Some(c) = counter.as_deref_mut() {
                        c.macs += plane as u64;
                    }
                    if x_lo >= x_hi {
                        continue;
                    }
                    let sx_lo = (x_lo as isize + dx) as usize;
                    let len = x_hi - x_lo;
                    for y in y_lo..y_hi {
                        let sy = (y as isize + dy) as usize;
                        axpy(
                            &mut o[y * w + x_lo..y * w + x_lo + len],
                            wv,
                            &src[sy * w + sx_lo..sy * w + sx_lo + len],
                        );
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients and (optionally) the input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    input: &[T],
    cin: usize,
    w: usize,
    h: usize,
    weight: &[T],
    cout: usize,
    k: usize,
    dout: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    mut dinput: Option<&mut [T]>,
) {
    let plane = w * h;
    let pad = (k / 2) as isize;
    for co in 0..cout {
        let g = &dout[co * plane..(co + 1) * plane];
        dbias[co] += g.iter().copied().sum::<T>();
        for ci in 0..cin {
            let src = &input[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y_lo, y_hi) = tap_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x_lo, x_hi) = tap_range(w, dx);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let widx = ((co * cin + ci) * k + ky) * k + kx;
                    let wv = weight[widx];
                    let sx_lo = (x_lo as isize + dx) as usize;
                    let len = x_hi - x_lo;
                    let mut acc = T::zero();
                    for y in y_lo..y_hi {
                        let sy = (y as isize + dy) as usize;
                        let gr = &g[y * w + x_lo..y * w + x_lo + len];
                        acc += dot(gr, &src[sy * w + sx_lo..sy * w + sx_lo + len]);
                        if let Some(di) = dinput.as_deref_mut() {
                            let dst = &mut di[ci * plane + sy * w + sx_lo..ci * plane + sy * w + sx_lo + len];
                            axpy(dst, wv, gr);
                        }
                    }
                    dweight[widx] += acc;
                }
            }
        }
    }
}

/// Per-channel mean/variance normalisation over the spatial extent.
/// Writes `x̂` into `out` and returns `1/sqrt(var + eps)` per channel.
pub fn instance_norm_forward<T: Real>(x: &[T], channels: usize, plane: usize, eps: T, out: &mut [T]) -> Vec<T> {
    let n = T::lit(plane as f64);
    let mut inv_std = Vec::with_capacity(channels);
    for c in 0..channels {
        let xs = &x[c * plane..(c + 1) * plane];
        let mean = xs.iter().copied().sum::<T>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        for (o, &v) in out[c * plane..(c + 1) * plane].iter_mut().zip(xs) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    inv_std
}

/// Input gradient of [`instance_norm_forward`] given `dL/dx̂`.
pub fn instance_norm_backward<T: Real>(xhat: &[T], inv_std: &[T], channels: usize, plane: usize, dxhat: &[T], dx: &mut [T]) {
    let n = T::lit(plane as f64);
    for (c, &inv) in inv_std.iter().enumerate().take(channels) {
        let r = c * plane..(c + 1) * plane;
        let g = &dxhat[r.clone()];
        let xh = &xhat[r.clone()];
        let sum_g = g.iter().copied().sum::<T>();
        let sum_gx = dot(g, xh);
        let scale = inv / n;
        for ((d, &gi), &xi) in dx[r].iter_mut().zip(g).zip(xh) {
            *d = scale * (n * gi - sum_g - xi * sum_gx);
        }
    }
}

pub fn avg_pool2_forward<T: Real>(x: &[T], channels: usize, w: usize, h: usize, out: &mut [T]) {
    let (ow, oh) = (w / 2, h / 2);
    let q = T::lit(0.25);
    for c in 0..channels {
        let src = &x[c * w * h..(c + 1) * w * h];
        let dst = &mut out[c * ow * oh..(c + 1) * ow * oh];
        for oy in 0..oh {
            let r0 = &src[2 * oy * w..2 * oy * w + w];
            let r1 = &src[(2 * oy + 1) * w..(2 * oy + 1) * w + w];
            for ox in 0..ow {
                dst[oy * ow + ox] = q * (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]);
            }
        }
    }
}

/// Accumulates the pooled gradient back onto the `w×h` input.
pub fn avg_pool2_backward<T: Real>(dout: &[T], channels: usize, w: usize, h: usize, dx: &mut [T]) {
    let (ow, oh) = (w / 2, h / 2);
    let q = T::lit(0.25);
    for c in 0..channels {
        let g = &dout[c * ow * oh..(c + 1) * ow * oh];
        let d = &mut dx[c * w * h..(c + 1) * w * h];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = q * g[oy * ow + ox];
                d[2 * oy * w + 2 * ox] += v;
                d[2 * oy * w + 2 * ox + 1] += v;
                d[(2 * oy + 1) * w + 2 * ox] += v;
                d[(2 * oy + 1) * w + 2 * ox + 1] += v;
            }
        }
    }
}

/// Linear-interpolation taps for upsampling `n` samples by `factor`
/// (half-pixel aligned, clamped at the ends).
#[derive(Clone, Debug)]
pub struct UpTaps<T> {
    pub i0: Vec<usize>,
    pub i1: Vec<usize>,
    pub t: Vec<T>,
}

impl<T: Real> UpTaps<T> {
    pub fn new(n: usize, factor: usize) -> Self {
        let m = n * factor;
        let (mut i0, mut i1, mut t) = (Vec::with_capacity(m), Vec::with_capacity(m), Vec::with_capacity(m));
        for i in 0..m {
            let src = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let a = (src.floor() as usize).min(n - 1);
            let b = (a + 1).min(n - 1);
            i0.push(a);
            i1.push(b);
            t.push(T::lit(src - a as f64));
        }
        Self { i0, i1, t }
    }
}

/// Bilinear upsampling of each channel from `n×n` to `(n·factor)²`.
pub fn upsample_forward<T: Real>(x: &[T], channels: usize, n: usize, taps: &UpTaps<T>, out: &mut [T], tmp: &mut Vec<T>) {
    let m = taps.t.len();
    tmp.clear();
    tmp.resize(n * m, T::zero());
    for c in 0..channels {
        let src = &x[c * n * n..(c + 1) * n * n];
        // along x
        for y in 0..n {
            for i in 0..m {
                let t = taps.t[i];
                tmp[y * m + i] = (T::one() - t) * src[y * n + taps.i0[i]] + t * src[y * n + taps.i1[i]];
            }
        }
        // along y
        let dst = &mut out[c * m * m..(c + 1) * m * m];
        for j in 0..m {
            let t = taps.t[j];
            let (r0, r1) = (taps.i0[j], taps.i1[j]);
            for i in 0..m {
                dst[j * m + i] = (T::one() - t) * tmp[r0 * m + i] + t * tmp[r1 * m + i];
            }
        }
    }
}

pub fn upsample_backward<T: Real>(dout: &[T], channels: usize, n: usize, taps: &UpTaps<T>, dx: &mut [T], tmp: &mut Vec<T>) {
    let m = taps.t.len();
    for c in 0..channels {
        tmp.clear();
        tmp.resize(n * m, T::zero());
        let g = &dout[c * m * m..(c + 1) * m * m];
        for j in 0..m {
            let t = taps.t[j];
            let (r0, r1) = (taps.i0[j], taps.i1[j]);
            for i in 0..m {
                let v = g[j * m + i];
                tmp[r0 * m + i] += (T::one() - t) * v;
                tmp[r1 * m + i] += t * v;
            }
        }
        let d = &mut dx[c * n * n..(c + 1) * n * n];
        for y in 0..n {
            for i in 0..m {
                let t = taps.t[i];
                let v = tmp[y * m + i];
                d[y * n + taps.i0[i]] += (T::one() - t) * v;
                d[y * n + taps.i1[i]] += t * v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tap_ranges() {
        assert_eq!(tap_range(8, -1), (1, 8));
        assert_eq!(tap_range(8, 1), (0, 7));
        assert_eq!(tap_range(8, 0), (0, 8));
        assert_eq!(tap_range(1, 1), (0, 0));
    }

    #[test]
    fn upsample_factor_one_is_identity() {
        let taps = UpTaps::<f64>::new(4, 1);
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let mut out = vec![0.0; 16];
        upsample_forward(&x, 1, 4, &taps, &mut out, &mut Vec::new());
        assert_eq!(out, x);
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let taps = UpTaps::<f64>::new(3, 4);
        let x = vec![0.7; 9];
        let mut out = vec![0.0; 144];
        upsample_forward(&x, 1, 3, &taps, &mut out, &mut Vec::new());
        assert!(out.iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        // <up(x), g> == <x, up^T(g)>
        let taps = UpTaps::<f64>::new(4, 2);
        let x: Vec<f64> = (0..32).map(|v| (v as f64 * 0.37).sin()).collect();
        let g: Vec<f64> = (0..128).map(|v| (v as f64 * 0.11).cos()).collect();
        let mut up = vec![0.0; 128];
        upsample_forward(&x, 2, 4, &taps, &mut up, &mut Vec::new());
        let mut back = vec![0.0; 32];
        upsample_backward(&g, 2, 4, &taps, &mut back, &mut Vec::new());
        let lhs: f64 = up.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pool_backward_is_adjoint() {
        let x: Vec<f64> = (0..32).map(|v| (v as f64 * 0.3).sin()).collect();
        let g: Vec<f64> = (0..8).map(|v| v as f64 - 3.0).collect();
        let mut p = vec![0.0; 8];
        avg_pool2_forward(&x, 2, 4, 4, &mut p);
        let mut back = vec![0.0; 32];
        avg_pool2_backward(&g, 2, 4, 4, &mut back);
        let lhs: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
