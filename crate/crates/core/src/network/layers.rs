//! Dense kernels and their adjoints.
//!
//! Output elements are always accumulated in the same order, so splitting the
//! work across threads never changes a result bit.

use rayon::prelude::*;

use super::FeatureMap;
use crate::error::{Error, Result};

/// 3×3 convolution weights `[out][in][3][3]` plus one bias per output channel.
#[derive(Debug, Clone, Copy)]
pub struct ConvKernel<'a> {
    pub weight: &'a [f64],
    pub bias: &'a [f64],
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvKernel<'_> {
    fn check(&self, x: &FeatureMap) -> Result<()> {
        if x.channels() != self.in_channels {
            return Err(Error::dims(
                format!("{} input channels", self.in_channels),
                format!("{} channels", x.channels()),
            ));
        }
        if self.weight.len() != self.out_channels * self.in_channels * 9 || self.bias.len() != self.out_channels {
            return Err(Error::dims(
                format!("{}x{}x3x3 kernel", self.out_channels, self.in_channels),
                format!("{} weights, {} biases", self.weight.len(), self.bias.len()),
            ));
        }
        Ok(())
    }
}

/// Dot product with four interleaved partial sums. The summation order is
/// fixed, so results do not depend on threading.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ar.iter().zip(br) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Valid output range along one axis for tap offset `off`: `[lo, hi)`.
#[inline]
fn tap_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off.max(0)).max(0) as usize;
    (lo.min(len), hi.max(lo.min(len)))
}

/// Stride-1 3×3 convolution with `dilation`-pixel zero padding, so the
/// spatial size is preserved.
pub fn conv2d(x: &FeatureMap, k: ConvKernel<'_>, dilation: usize) -> Result<FeatureMap> {
    k.check(x)?;
    Ok(conv2d_unchecked(x, k, dilation))
}

pub(crate) fn conv2d_unchecked(x: &FeatureMap, k: ConvKernel<'_>, dilation: usize) -> FeatureMap {
    let (h, w) = (x.height(), x.width());
    let n = h * w;
    let d = dilation as isize;
    let mut out = vec![0.0; k.out_channels * n];
    out.par_chunks_mut(n).enumerate().for_each(|(co, plane)| {
        plane.fill(k.bias[co]);
        for ci in 0..k.in_channels {
            let src = x.plane(ci);
            let taps = &k.weight[(co * k.in_channels + ci) * 9..][..9];
            for ky in 0..3 {
                let oy = (ky as isize - 1) * d;
                let (y0, y1) = tap_range(h, oy);
                for kx in 0..3 {
                    let wv = taps[ky * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let ox = (kx as isize - 1) * d;
                    let (x0, x1) = tap_range(w, ox);
                    for y in y0..y1 {
                        let sy = (y as isize + oy) as usize;
                        let dst = &mut plane[y * w + x0..y * w + x1];
                        let s = &src[sy * w + (x0 as isize + ox) as usize..][..x1 - x0];
                        for (o, &v) in dst.iter_mut().zip(s) {
                            *o += wv * v;
                        }
                    }
                }
            }
        }
    });
    FeatureMap::new(k.out_channels, h, w, out).expect("shape is consistent")
}

/// Returns `dx`; accumulates into `dw` and `db`.
pub(crate) fn conv2d_backward(
    x: &FeatureMap,
    k: ConvKernel<'_>,
    dilation: usize,
    dy: &FeatureMap,
    dw: &mut [f64],
    db: &mut [f64],
) -> FeatureMap {
    let (h, w) = (x.height(), x.width());
    let n = h * w;
    let d = dilation as isize;

    for (co, b) in db.iter_mut().enumerate() {
        *b += dy.plane(co).iter().sum::<f64>();
    }

    dw.par_chunks_mut(k.in_channels * 9).enumerate().for_each(|(co, dwc)| {
        let g = dy.plane(co);
        for ci in 0..k.in_channels {
            let src = x.plane(ci);
            for ky in 0..3 {
                let oy = (ky as isize - 1) * d;
                let (y0, y1) = tap_range(h, oy);
                for kx in 0..3 {
                    let ox = (kx as isize - 1) * d;
                    let (x0, x1) = tap_range(w, ox);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + oy) as usize;
                        let gr = &g[y * w + x0..y * w + x1];
                        let s = &src[sy * w + (x0 as isize + ox) as usize..][..x1 - x0];
                        acc += dot(gr, s);
                    }
                    dwc[ci * 9 + ky * 3 + kx] += acc;
                }
            }
        }
    });

    let mut dx = vec![0.0; k.in_channels * n];
    dx.par_chunks_mut(n).enumerate().for_each(|(ci, plane)| {
        for co in 0..k.out_channels {
            let g = dy.plane(co);
            let taps = &k.weight[(co * k.in_channels + ci) * 9..][..9];
            for ky in 0..3 {
                let oy = (ky as isize - 1) * d;
                let (y0, y1) = tap_range(h, oy);
                for kx in 0..3 {
                    let wv = taps[ky * 3 + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let ox = (kx as isize - 1) * d;
                    let (x0, x1) = tap_range(w, ox);
                    for y in y0..y1 {
                        let sy = (y as isize + oy) as usize;
                        let gr = &g[y * w + x0..y * w + x1];
                        let dst = &mut plane[sy * w + (x0 as isize + ox) as usize..][..x1 - x0];
                        for (o, &v) in dst.iter_mut().zip(gr) {
                            *o += wv * v;
                        }
                    }
                }
            }
        }
    });
    FeatureMap::new(k.in_channels, h, w, dx).expect("shape is consistent")
}

/// Row-wise affine map on token-major data: `y[n] = W x[n] + b`, `W` is `dout × din`.
pub(crate) fn linear(x: &[f64], weight: &[f64], bias: &[f64], din: usize, dout: usize) -> Vec<f64> {
    let rows = x.len() / din;
    let mut y = vec![0.0; rows * dout];
    y.par_chunks_mut(dout).zip(x.par_chunks(din)).for_each(|(yr, xr)| {
        for (o, yo) in yr.iter_mut().enumerate() {
            let wr = &weight[o * din..(o + 1) * din];
            *yo = bias[o] + dot(wr, xr);
        }
    });
    y
}

/// Returns `dx`; accumulates into `dw` and `db`.
pub(crate) fn linear_backward(
    x: &[f64],
    weight: &[f64],
    din: usize,
    dout: usize,
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
) -> Vec<f64> {
    let rows = x.len() / din;
    for r in 0..rows {
        for (b, g) in db.iter_mut().zip(&dy[r * dout..(r + 1) * dout]) {
            *b += g;
        }
    }
    dw.par_chunks_mut(din).enumerate().for_each(|(o, dwr)| {
        for r in 0..rows {
            let g = dy[r * dout + o];
            if g == 0.0 {
                continue;
            }
            for (a, &v) in dwr.iter_mut().zip(&x[r * din..(r + 1) * din]) {
                *a += g * v;
            }
        }
    });
    let mut dx = vec![0.0; rows * din];
    dx.par_chunks_mut(din).zip(dy.par_chunks(dout)).for_each(|(dxr, dyr)| {
        for (o, &g) in dyr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (a, &wv) in dxr.iter_mut().zip(&weight[o * din..(o + 1) * din]) {
                *a += g * wv;
            }
        }
    });
    dx
}

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Layer norm over the channel axis of token-major data.
pub(crate) fn layer_norm(x: &[f64], scale: &[f64], shift: &[f64], dim: usize) -> (Vec<f64>, NormCache) {
    let rows = x.len() / dim;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let mean = xr.iter().sum::<f64>() / dim as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        for i in 0..dim {
            let xh = (xr[i] - mean) * is;
            xhat[r * dim + i] = xh;
            y[r * dim + i] = scale[i] * xh + shift[i];
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(
    cache: &NormCache,
    scale: &[f64],
    dim: usize,
    dy: &[f64],
    dscale: &mut [f64],
    dshift: &mut [f64],
) -> Vec<f64> {
    let rows = cache.inv_std.len();
    let mut dx = vec![0.0; dy.len()];
    let mut dxh = vec![0.0; dim];
    for r in 0..rows {
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        let g = &dy[r * dim..(r + 1) * dim];
        for i in 0..dim {
            dscale[i] += g[i] * xh[i];
            dshift[i] += g[i];
            dxh[i] = g[i] * scale[i];
        }
        let mean_d = dxh.iter().sum::<f64>() / dim as f64;
        let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
        for i in 0..dim {
            dx[r * dim + i] = cache.inv_std[r] * (dxh[i] - mean_d - xh[i] * mean_dx);
        }
    }
    dx
}

/// Exact GELU, `x Φ(x)`.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[inline]
pub(crate) fn gelu_slope(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[inline]
pub(crate) fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// In-place softmax over the entries of `row` selected by `allowed`; the rest become 0.
pub(crate) fn masked_softmax(row: &mut [f64], allowed: impl Fn(usize) -> bool) {
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) && v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax adjoint for one row: `dl = p ⊙ (dp − ⟨p, dp⟩)`.
pub(crate) fn softmax_backward(p: &[f64], dp: &[f64], dl: &mut [f64]) {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    for ((o, &pi), &gi) in dl.iter_mut().zip(p).zip(dp) {
        *o = pi * (gi - dot);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
        FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct definition, one output sample at a time.
    fn conv_reference(x: &FeatureMap, weight: &[f64], bias: &[f64], cout: usize, d: isize) -> FeatureMap {
        let (cin, h, w) = (x.channels(), x.height() as isize, x.width() as isize);
        let mut out = vec![0.0; cout * (h * w) as usize];
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + (ky - 1) * d, xx + (kx - 1) * d);
                                if sy >= 0 && sy < h && sx >= 0 && sx < w {
                                    acc += weight[((co * cin + ci) * 9) + (ky * 3 + kx) as usize]
                                        * x.at(ci, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    out[(co * h as usize + y as usize) * w as usize + xx as usize] = acc;
                }
            }
        }
        FeatureMap::new(cout, h as usize, w as usize, out).unwrap()
    }

    #[test]
    fn conv_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in [1, 2, 4] {
            let x = random_map(3, 9, 7, &mut rng);
            let weight: Vec<f64> = (0..2 * 3 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bias = vec![0.3, -0.2];
            let k = ConvKernel {
                weight: &weight,
                bias: &bias,
                in_channels: 3,
                out_channels: 2,
            };
            let got = conv2d(&x, k, d).unwrap();
            let want = conv_reference(&x, &weight, &bias, 2, d as isize);
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = FeatureMap::zeros(2, 4, 4);
        let k = ConvKernel {
            weight: &[0.0; 27],
            bias: &[0.0],
            in_channels: 3,
            out_channels: 1,
        };
        assert_eq!(conv2d(&x, k, 1).unwrap_err().code(), "dimension_mismatch");
    }

    #[test]
    fn conv_backward_is_the_adjoint() {
        // <conv(x), g> = <x, conv^T(g)> and dW against finite differences
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_map(2, 6, 5, &mut rng);
        let g = random_map(3, 6, 5, &mut rng);
        let weight: Vec<f64> = (0..3 * 2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias = vec![0.0; 3];
        let k = ConvKernel {
            weight: &weight,
            bias: &bias,
            in_channels: 2,
            out_channels: 3,
        };
        let y = conv2d(&x, k, 2).unwrap();
        let mut dw = vec![0.0; weight.len()];
        let mut db = vec![0.0; 3];
        let dx = conv2d_backward(&x, k, 2, &g, &mut dw, &mut db);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // y is linear in the weights, so <y, g> = <w, dw>
        let via_w: f64 = weight.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - via_w).abs() < 1e-10);
        for co in 0..3 {
            assert!((db[co] - g.plane(co).iter().sum::<f64>()).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_and_norm_backward_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (din, dout, rows) = (5, 4, 3);
        let x: Vec<f64> = (0..rows * din).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..din * dout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..dout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scale: Vec<f64> = (0..din).map(|_| rng.random_range(0.5..1.5)).collect();
        let shift: Vec<f64> = (0..din).map(|_| rng.random_range(-0.5..0.5)).collect();
        let g: Vec<f64> = (0..rows * dout).map(|_| rng.random_range(-1.0..1.0)).collect();

        let f = |x: &[f64]| -> f64 {
            let (n, _) = layer_norm(x, &scale, &shift, din);
            let y = linear(&n, &w, &b, din, dout);
            y.iter().zip(&g).map(|(a, c)| a.tanh() * c).sum()
        };
        let (n, cache) = layer_norm(&x, &scale, &shift, din);
        let y = linear(&n, &w, &b, din, dout);
        let dy: Vec<f64> = y.iter().zip(&g).map(|(a, c)| (1.0 - a.tanh().powi(2)) * c).collect();
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; b.len()];
        let dn = linear_backward(&n, &w, din, dout, &dy, &mut dw, &mut db);
        let mut ds = vec![0.0; din];
        let mut dsh = vec![0.0; din];
        let dx = layer_norm_backward(&cache, &scale, din, &dn, &mut ds, &mut dsh);
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut up = x.clone();
            up[i] += eps;
            let mut dn_ = x.clone();
            dn_[i] -= eps;
            let fd = (f(&up) - f(&dn_)) / (2.0 * eps);
            assert!((fd - dx[i]).abs() < 1e-7, "{i}: {fd} vs {}", dx[i]);
        }
    }

    #[test]
    fn gelu_slope_matches_finite_differences() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_slope(x)).abs() < 1e-8);
        }
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
    }

    #[test]
    fn masked_softmax_normalizes_allowed_entries() {
        let mut row = vec![1.0, 2.0, 3.0, 4.0];
        masked_softmax(&mut row, |j| j != 2);
        assert_eq!(row[2], 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
