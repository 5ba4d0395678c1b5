//! Gradient fields, Gaussian-smoothed structure tensors and the scalar ST map.
//!
//! The ST map response is `sqrt(λ1 − λ2)`, the square root of the eigenvalue
//! gap of the smoothed tensor. An oriented edge keeps its full energy while
//! isotropic noise, whose smoothed tensor has nearly equal eigenvalues, is
//! suppressed. Without smoothing the tensor is rank one and the response
//! reduces to the plain gradient magnitude.
//!
//! Every map is divided by its 99.9th-percentile response and clamped to
//! `[0, 1]`, so a handful of hot pixels cannot flatten the rest of the map.
//!
//! [`StMapTape`] records the forward pass so the loss can push gradients
//! back through the whole chain to the input luminance.

use crate::error::{Error, Result};
use crate::image_io::Plane;

/// Default tensor smoothing scale, in pixels.
pub const DEFAULT_RHO: f64 = 1.5;

/// Percentile used to normalize response maps.
pub const NORMALIZATION_PERCENTILE: f64 = 99.9;

/// Rec. 709 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.2126, 0.7152, 0.0722];

pub fn luminance(channels: &[Plane]) -> Result<Plane> {
    if channels.len() != 3 {
        return Err(Error::dims("3 channels", format!("{} channels", channels.len())));
    }
    let (w, h) = (channels[0].width, channels[0].height);
    for c in &channels[1..] {
        if (c.width, c.height) != (w, h) {
            return Err(Error::dims(format!("{w}x{h}"), format!("{}x{}", c.width, c.height)));
        }
    }
    let data = (0..w * h)
        .map(|i| {
            LUMA_WEIGHTS[0] * channels[0].data[i]
                + LUMA_WEIGHTS[1] * channels[1].data[i]
                + LUMA_WEIGHTS[2] * channels[2].data[i]
        })
        .collect();
    Ok(Plane { width: w, height: h, data })
}

/// Luminance of interleaved RGB samples.
pub fn luminance_of(rgb: &[f64], width: usize, height: usize) -> Plane {
    debug_assert_eq!(rgb.len(), width * height * 3);
    let data = rgb
        .chunks_exact(3)
        .map(|p| LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2])
        .collect();
    Plane { width, height, data }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub gx: Plane,
    pub gy: Plane,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StTensorField {
    pub jxx: Plane,
    pub jxy: Plane,
    pub jyy: Plane,
}

/// Scalar structure map with samples in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StMap(Plane);

impl StMap {
    pub fn new(plane: Plane) -> Result<Self> {
        for (index, &v) in plane.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteSample { index });
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::SampleOutOfRange { index, value: v });
            }
        }
        Ok(StMap(plane))
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn plane(&self) -> &Plane {
        &self.0
    }

    pub fn into_plane(self) -> Plane {
        self.0
    }
}

const SOBEL_MIN_DIM: usize = 3;

/// 3×3 Sobel pair scaled by 1/8, replicate-padded.
pub fn gradients(img: &Plane) -> Result<GradientField> {
    if img.width < SOBEL_MIN_DIM || img.height < SOBEL_MIN_DIM {
        return Err(Error::ImageTooSmall {
            width: img.width,
            height: img.height,
            min: SOBEL_MIN_DIM,
        });
    }
    let (w, h) = (img.width, img.height);
    let mut gx = Plane::zeros(w, h);
    let mut gy = Plane::zeros(w, h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let p = |dx: isize, dy: isize| img.at_clamped(x + dx, y + dy);
            let i = y as usize * w + x as usize;
            gx.data[i] = ((p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1))) / 8.0;
            gy.data[i] = ((p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1))) / 8.0;
        }
    }
    Ok(GradientField { gx, gy })
}

/// Adjoint of [`gradients`]: scatters `(dgx, dgy)` back onto the source plane.
fn gradients_adjoint(dgx: &Plane, dgy: &Plane) -> Plane {
    let (w, h) = (dgx.width, dgx.height);
    let mut out = Plane::zeros(w, h);
    let clamp = |x: isize, y: isize| {
        (y.clamp(0, h as isize - 1) as usize) * w + x.clamp(0, w as isize - 1) as usize
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let (ax, ay) = (dgx.data[i] / 8.0, dgy.data[i] / 8.0);
            for (dy, wt) in [(-1isize, 1.0), (0, 2.0), (1, 1.0)] {
                out.data[clamp(x + 1, y + dy)] += wt * ax;
                out.data[clamp(x - 1, y + dy)] -= wt * ax;
            }
            for (dx, wt) in [(-1isize, 1.0), (0, 2.0), (1, 1.0)] {
                out.data[clamp(x + dx, y + 1)] += wt * ay;
                out.data[clamp(x + dx, y - 1)] -= wt * ay;
            }
        }
    }
    out
}

/// Normalized 1-D Gaussian taps over `[-⌈3ρ⌉, ⌈3ρ⌉]`; `ρ = 0` gives the identity.
pub fn gaussian_kernel(rho: f64) -> Vec<f64> {
    if rho == 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * rho).ceil() as isize;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * rho * rho)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable smoothing with replicate borders; `adjoint` applies the transpose.
fn smooth(src: &Plane, taps: &[f64], adjoint: bool) -> Plane {
    if taps.len() == 1 {
        return src.clone();
    }
    let (w, h) = (src.width, src.height);
    let r = (taps.len() / 2) as isize;
    let cx = |x: isize| x.clamp(0, w as isize - 1) as usize;
    let cy = |y: isize| y.clamp(0, h as isize - 1) as usize;
    let mut tmp = Plane::zeros(w, h);
    let mut out = Plane::zeros(w, h);
    if !adjoint {
        for y in 0..h {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    acc += t * src.data[y * w + cx(x + k as isize - r)];
                }
                tmp.data[y * w + x as usize] = acc;
            }
        }
        for y in 0..h as isize {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    acc += t * tmp.data[cy(y + k as isize - r) * w + x];
                }
                out.data[y as usize * w + x] = acc;
            }
        }
    } else {
        for y in 0..h as isize {
            for x in 0..w {
                let g = src.data[y as usize * w + x];
                for (k, &t) in taps.iter().enumerate() {
                    tmp.data[cy(y + k as isize - r) * w + x] += t * g;
                }
            }
        }
        for y in 0..h {
            for x in 0..w as isize {
                let g = tmp.data[y * w + x as usize];
                for (k, &t) in taps.iter().enumerate() {
                    out.data[y * w + cx(x + k as isize - r)] += t * g;
                }
            }
        }
    }
    out
}

fn check_rho(rho: f64) -> Result<()> {
    if rho >= 0.0 && rho.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("rho must be finite and >= 0, got {rho}")))
    }
}

pub fn structure_tensor(g: &GradientField, rho: f64) -> Result<StTensorField> {
    check_rho(rho)?;
    let taps = gaussian_kernel(rho);
    let prod = |f: &dyn Fn(f64, f64) -> f64| Plane {
        width: g.gx.width,
        height: g.gx.height,
        data: g.gx.data.iter().zip(&g.gy.data).map(|(&a, &b)| f(a, b)).collect(),
    };
    Ok(StTensorField {
        jxx: smooth(&prod(&|a, _| a * a), &taps, false),
        jxy: smooth(&prod(&|a, b| a * b), &taps, false),
        jyy: smooth(&prod(&|_, b| b * b), &taps, false),
    })
}

/// `(jxx − jyy)² + 4 jxy²`, the squared eigenvalue gap.
#[inline]
fn gap_sq(jxx: f64, jxy: f64, jyy: f64) -> f64 {
    let d = jxx - jyy;
    d * d + 4.0 * jxy * jxy
}

/// Linear-interpolated percentile of `values` (numpy's default rule).
///
/// Returns the value together with the two order-statistic indices and the
/// interpolation weight of the upper one.
fn percentile(values: &[f64], pct: f64) -> (f64, usize, usize, f64) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let pos = pct / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let frac = pos - lo as f64;
    let (a, b) = (values[order[lo]], values[order[hi]]);
    (a + frac * (b - a), order[lo], order[hi], frac)
}

fn normalize_response(response: &[f64]) -> (Vec<f64>, f64) {
    let (p, ..) = percentile(response, NORMALIZATION_PERCENTILE);
    let data = if p > 0.0 {
        response.iter().map(|&r| (r / p).min(1.0)).collect()
    } else {
        vec![0.0; response.len()]
    };
    (data, p)
}

pub fn st_map(t: &StTensorField) -> StMap {
    let response: Vec<f64> = (0..t.jxx.data.len())
        .map(|i| gap_sq(t.jxx.data[i], t.jxy.data[i], t.jyy.data[i]).sqrt().sqrt())
        .collect();
    let (data, _) = normalize_response(&response);
    StMap(Plane {
        width: t.jxx.width,
        height: t.jxx.height,
        data,
    })
}

/// `sqrt(gx² + gy²)` with the same normalization as [`st_map`].
pub fn gradient_magnitude_map(img: &Plane) -> Result<StMap> {
    let g = gradients(img)?;
    let response: Vec<f64> = g.gx.data.iter().zip(&g.gy.data).map(|(a, b)| a.hypot(*b)).collect();
    let (data, _) = normalize_response(&response);
    Ok(StMap(Plane {
        width: img.width,
        height: img.height,
        data,
    }))
}

/// Gradients, tensor and map in one go.
pub fn st_map_of_plane(img: &Plane, rho: f64) -> Result<StMap> {
    Ok(st_map(&structure_tensor(&gradients(img)?, rho)?))
}

/// Recorded forward pass of [`st_map_of_plane`], for backpropagation.
pub struct StMapTape {
    taps: Vec<f64>,
    grads: GradientField,
    tensor: StTensorField,
    gap: Vec<f64>,
    response: Vec<f64>,
    scale: f64,
    pct_lo: usize,
    pct_hi: usize,
    pct_frac: f64,
    map: StMap,
}

impl StMapTape {
    pub fn record(img: &Plane, rho: f64) -> Result<Self> {
        let grads = gradients(img)?;
        let tensor = structure_tensor(&grads, rho)?;
        let gap: Vec<f64> = (0..img.data.len())
            .map(|i| gap_sq(tensor.jxx.data[i], tensor.jxy.data[i], tensor.jyy.data[i]))
            .collect();
        let response: Vec<f64> = gap.iter().map(|q| q.sqrt().sqrt()).collect();
        let (scale, pct_lo, pct_hi, pct_frac) = percentile(&response, NORMALIZATION_PERCENTILE);
        let (data, _) = normalize_response(&response);
        Ok(StMapTape {
            taps: gaussian_kernel(rho),
            grads,
            tensor,
            gap,
            response,
            scale,
            pct_lo,
            pct_hi,
            pct_frac,
            map: StMap(Plane {
                width: img.width,
                height: img.height,
                data,
            }),
        })
    }

    pub fn map(&self) -> &StMap {
        &self.map
    }

    /// Gradient with respect to the source plane given the gradient with
    /// respect to the map.
    pub fn backward(&self, d_map: &[f64]) -> Plane {
        let (w, h) = (self.map.width(), self.map.height());
        let n = w * h;
        let mut d_resp = vec![0.0; n];
        if self.scale > 0.0 {
            let p = self.scale;
            let mut d_scale = 0.0;
            for i in 0..n {
                let r = self.response[i];
                // clamped samples carry no gradient
                if r < p {
                    d_resp[i] += d_map[i] / p;
                    d_scale -= d_map[i] * r / (p * p);
                }
            }
            d_resp[self.pct_lo] += (1.0 - self.pct_frac) * d_scale;
            d_resp[self.pct_hi] += self.pct_frac * d_scale;
        }

        let t = &self.tensor;
        let mut d_xx = Plane::zeros(w, h);
        let mut d_xy = Plane::zeros(w, h);
        let mut d_yy = Plane::zeros(w, h);
        for i in 0..n {
            let q = self.gap[i];
            if q <= 0.0 {
                continue;
            }
            let dq = d_resp[i] * 0.25 * q.powf(-0.75);
            let diff = t.jxx.data[i] - t.jyy.data[i];
            d_xx.data[i] = 2.0 * diff * dq;
            d_yy.data[i] = -2.0 * diff * dq;
            d_xy.data[i] = 8.0 * t.jxy.data[i] * dq;
        }
        let d_xx = smooth(&d_xx, &self.taps, true);
        let d_xy = smooth(&d_xy, &self.taps, true);
        let d_yy = smooth(&d_yy, &self.taps, true);

        let (gx, gy) = (&self.grads.gx.data, &self.grads.gy.data);
        let mut dgx = Plane::zeros(w, h);
        let mut dgy = Plane::zeros(w, h);
        for i in 0..n {
            dgx.data[i] = 2.0 * gx[i] * d_xx.data[i] + gy[i] * d_xy.data[i];
            dgy.data[i] = 2.0 * gy[i] * d_yy.data[i] + gx[i] * d_xy.data[i];
        }
        gradients_adjoint(&dgx, &dgy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(w: usize, h: usize, seed: u64) -> Plane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Plane::from_fn(w, h, |_, _| rng.random::<f64>())
    }

    #[test]
    fn luminance_weights() {
        let mk = |r, g, b| {
            let planes: Vec<Plane> = [r, g, b].iter().map(|&v| Plane::new(1, 1, vec![v]).unwrap()).collect();
            luminance(&planes).unwrap().data[0]
        };
        assert!((mk(1.0, 1.0, 1.0) - 1.0).abs() < 1e-15);
        assert_eq!(mk(0.0, 0.0, 0.0), 0.0);
        assert_eq!(mk(1.0, 0.0, 0.0), 0.2126);
        let two = vec![Plane::zeros(2, 2), Plane::zeros(2, 2)];
        assert_eq!(luminance(&two).unwrap_err().code(), "dimension_mismatch");
    }

    #[test]
    fn sobel_on_constant_and_ramp() {
        let c = Plane::from_fn(9, 7, |_, _| 0.3);
        let g = gradients(&c).unwrap();
        assert!(g.gx.data.iter().chain(&g.gy.data).all(|&v| v == 0.0));

        let w = 11;
        let ramp = Plane::from_fn(w, 6, |x, _| x as f64 / (w - 1) as f64);
        let g = gradients(&ramp).unwrap();
        for y in 0..6 {
            for x in 1..w - 1 {
                assert!((g.gx.at(x, y) - 1.0 / (w - 1) as f64).abs() < 1e-14);
                assert!(g.gy.at(x, y).abs() < 1e-14);
            }
        }
        assert_eq!(gradients(&Plane::zeros(2, 5)).unwrap_err().code(), "image_too_small");
    }

    #[test]
    fn sobel_transpose_swaps_components() {
        let p = random_plane(7, 5, 1);
        let g = gradients(&p).unwrap();
        let gt = gradients(&p.transpose()).unwrap();
        for (a, b) in g.gx.transpose().data.iter().zip(&gt.gy.data) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in g.gy.transpose().data.iter().zip(&gt.gx.data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn tensor_without_smoothing_is_pointwise() {
        let mut gx = Plane::zeros(5, 5);
        gx.data[12] = 1.0;
        let field = GradientField { gx, gy: Plane::zeros(5, 5) };
        let t = structure_tensor(&field, 0.0).unwrap();
        assert_eq!(t.jxx.data[12], 1.0);
        assert_eq!(t.jxx.data.iter().sum::<f64>(), 1.0);
        assert!(t.jxy.data.iter().chain(&t.jyy.data).all(|&v| v == 0.0));

        let zero = GradientField { gx: Plane::zeros(5, 5), gy: Plane::zeros(5, 5) };
        let t = structure_tensor(&zero, 1.5).unwrap();
        assert!(t.jxx.data.iter().all(|&v| v == 0.0));
        assert!(structure_tensor(&zero, -1.0).is_err());
    }

    #[test]
    fn impulse_spreads_as_discrete_gaussian() {
        // brute-force 2-D convolution with independently built weights
        let rho = 1.5f64;
        let radius = 5isize;
        let raw = |k: isize| (-(k * k) as f64 / (2.0 * rho * rho)).exp();
        let norm: f64 = (-radius..=radius).map(raw).sum();
        let n = 21;
        let mut gx = Plane::zeros(n, n);
        gx.data[10 * n + 10] = 1.0;
        let t = structure_tensor(&GradientField { gx, gy: Plane::zeros(n, n) }, rho).unwrap();
        for y in 0..n as isize {
            for x in 0..n as isize {
                let (dx, dy) = (x - 10, y - 10);
                let want = if dx.abs() <= radius && dy.abs() <= radius {
                    raw(dx) * raw(dy) / (norm * norm)
                } else {
                    0.0
                };
                assert!((t.jxx.at(x as usize, y as usize) - want).abs() < 1e-15);
            }
        }
        assert_eq!(gaussian_kernel(1.5).len(), 11);
    }

    #[test]
    fn constant_image_maps_to_zero() {
        let c = Plane::from_fn(12, 12, |_, _| 0.7);
        assert!(st_map_of_plane(&c, 1.5).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(gradient_magnitude_map(&c).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_edge_peaks_at_one() {
        let img = Plane::from_fn(32, 32, |x, _| if x < 16 { 0.2 } else { 0.8 });
        let m = st_map_of_plane(&img, 1.5).unwrap();
        for y in 0..32 {
            assert!((m.plane().at(15, y) - 1.0).abs() < 1e-12);
            assert!((m.plane().at(16, y) - 1.0).abs() < 1e-12);
        }
        assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn ramp_magnitude_is_uniform_inside() {
        let img = Plane::from_fn(16, 16, |x, y| 0.05 * x as f64 + 0.02 * y as f64);
        let m = gradient_magnitude_map(&img).unwrap();
        for y in 1..15 {
            for x in 1..15 {
                assert!((m.plane().at(x, y) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unsmoothed_map_equals_gradient_magnitude() {
        let p = random_plane(13, 9, 4);
        let a = st_map_of_plane(&p, 0.0).unwrap();
        let b = gradient_magnitude_map(&p).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn hot_pixel_does_not_crush_map() {
        let mut img = Plane::from_fn(100, 100, |x, _| if x < 50 { 0.3 } else { 0.5 });
        img.data[5 * 100 + 5] = 50.0;
        let m = gradient_magnitude_map(&img).unwrap();
        // the edge is still clearly visible next to the outlier
        assert!(m.plane().at(50, 60) > 0.5);
    }

    #[test]
    fn tape_matches_forward() {
        let p = random_plane(10, 10, 9);
        let tape = StMapTape::record(&p, 1.5).unwrap();
        assert_eq!(tape.map(), &st_map_of_plane(&p, 1.5).unwrap());
    }

    #[test]
    fn tape_backward_matches_finite_differences() {
        let p = random_plane(9, 8, 21);
        let weights: Vec<f64> = (0..72).map(|i| ((i * 37) % 11) as f64 / 11.0 - 0.5).collect();
        let f = |pl: &Plane| -> f64 {
            st_map_of_plane(pl, 1.5).unwrap().data().iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let tape = StMapTape::record(&p, 1.5).unwrap();
        let grad = tape.backward(&weights);
        let eps = 1e-6;
        for i in 0..p.data.len() {
            let mut up = p.clone();
            up.data[i] += eps;
            let mut dn = p.clone();
            dn.data[i] -= eps;
            let fd = (f(&up) - f(&dn)) / (2.0 * eps);
            let denom = fd.abs().max(grad.data[i].abs()).max(1e-6);
            assert!((fd - grad.data[i]).abs() / denom < 1e-4, "pixel {i}: fd {fd} vs {}", grad.data[i]);
        }
    }

    proptest! {
        #[test]
        fn smoothed_tensor_stays_psd(seed in any::<u64>(), rho in 0.0f64..3.0) {
            let p = random_plane(12, 10, seed);
            let t = structure_tensor(&gradients(&p).unwrap(), rho).unwrap();
            for i in 0..p.data.len() {
                let (a, b, c) = (t.jxx.data[i], t.jxy.data[i], t.jyy.data[i]);
                prop_assert!(a >= 0.0 && c >= 0.0);
                prop_assert!(b * b <= a * c + 1e-9);
            }
        }

        #[test]
        fn st_map_commutes_with_transpose(seed in any::<u64>()) {
            let p = random_plane(11, 7, seed);
            let a = st_map_of_plane(&p, 1.5).unwrap().into_plane().transpose();
            let b = st_map_of_plane(&p.transpose(), 1.5).unwrap();
            for (x, y) in a.data.iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
