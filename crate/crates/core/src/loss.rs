//! Training loss and PSNR metrics.
//!
//! The loss is the mean squared error between μ-law compressed prediction and
//! target, plus `λ` times the mean absolute error between the compressed
//! structure maps of both. Structure maps are taken from the luminance of the
//! compressed images with `ρ = 1.5`. Both reductions are means, so `λ` keeps
//! its meaning at any resolution.

use crate::error::{Error, Result};
use crate::image_io::{interleaved_to_planar, HdrImage, Plane};
use crate::network::FeatureMap;
use crate::radiometry::{tonemap_mu, TonemapConfig};
use crate::structure_tensor::{StMapTape, DEFAULT_RHO, LUMA_WEIGHTS};

/// Default weight of the structure term.
pub const DEFAULT_LAMBDA: f64 = 1e-2;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub mse_term: f64,
    pub st_term: f64,
    pub lambda: f64,
}

fn check_same(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::dims(format!("{}x{}", a.0, a.1), format!("{}x{}", b.0, b.1)));
    }
    Ok(())
}

fn compressed_luminance(planar: &[f64], n: usize, w: usize, h: usize, tm: &TonemapConfig) -> Plane {
    let data = (0..n)
        .map(|i| (0..3).map(|c| LUMA_WEIGHTS[c] * tm.compress(planar[c * n + i])).sum())
        .collect();
    Plane { width: w, height: h, data }
}

/// Loss on channel-major `3 × H × W` samples, optionally with its gradient
/// with respect to `pred`.
fn evaluate(
    pred: &[f64],
    target: &[f64],
    width: usize,
    height: usize,
    lambda: f64,
    tm: &TonemapConfig,
    want_grad: bool,
) -> Result<(LossValue, Option<Vec<f64>>)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!("lambda must be >= 0, got {lambda}")));
    }
    let n = width * height;
    let m = (3 * n) as f64;

    let mut mse = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        let d = tm.compress(p) - tm.compress(t);
        mse += d * d;
    }
    let mse_term = mse / m;

    let tape = StMapTape::record(&compressed_luminance(pred, n, width, height, tm), DEFAULT_RHO)?;
    let target_map = StMapTape::record(&compressed_luminance(target, n, width, height, tm), DEFAULT_RHO)?;
    let (sp, st) = (tape.map().data(), target_map.map().data());
    let st_term = sp
        .iter()
        .zip(st)
        .map(|(&a, &b)| (tm.compress(a) - tm.compress(b)).abs())
        .sum::<f64>()
        / n as f64;

    let value = LossValue {
        total: mse_term + lambda * st_term,
        mse_term,
        st_term,
        lambda,
    };
    if !want_grad {
        return Ok((value, None));
    }

    let mut grad: Vec<f64> = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| 2.0 * (tm.compress(p) - tm.compress(t)) / m * tm.compress_slope(p))
        .collect();
    if lambda > 0.0 {
        let d_map: Vec<f64> = sp
            .iter()
            .zip(st)
            .map(|(&a, &b)| {
                let diff = tm.compress(a) - tm.compress(b);
                let sign = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                lambda * sign / n as f64 * tm.compress_slope(a)
            })
            .collect();
        let d_lum = tape.backward(&d_map);
        for c in 0..3 {
            for i in 0..n {
                grad[c * n + i] += d_lum.data[i] * LUMA_WEIGHTS[c] * tm.compress_slope(pred[c * n + i]);
            }
        }
    }
    Ok((value, Some(grad)))
}

pub fn loss(h: &HdrImage, gt: &HdrImage, lambda: f64, tm: &TonemapConfig) -> Result<LossValue> {
    check_same((h.width(), h.height()), (gt.width(), gt.height()))?;
    let n = h.width() * h.height();
    let (pred, target) = (interleaved_to_planar(h.data(), n), interleaved_to_planar(gt.data(), n));
    Ok(evaluate(&pred, &target, h.width(), h.height(), lambda, tm, false)?.0)
}

/// Loss of a `3 × H × W` network output together with its gradient.
pub fn loss_and_gradient(
    pred: &FeatureMap,
    target: &FeatureMap,
    lambda: f64,
    tm: &TonemapConfig,
) -> Result<(LossValue, FeatureMap)> {
    check_rgb_maps(pred, target)?;
    let (w, h) = (pred.width(), pred.height());
    let (value, grad) = evaluate(pred.data(), target.data(), w, h, lambda, tm, true)?;
    Ok((value, FeatureMap::new(3, h, w, grad.expect("requested")).expect("shape")))
}

/// Loss of a `3 × H × W` network output.
pub fn loss_planar(pred: &FeatureMap, target: &FeatureMap, lambda: f64, tm: &TonemapConfig) -> Result<LossValue> {
    check_rgb_maps(pred, target)?;
    Ok(evaluate(pred.data(), target.data(), pred.width(), pred.height(), lambda, tm, false)?.0)
}

fn check_rgb_maps(pred: &FeatureMap, target: &FeatureMap) -> Result<()> {
    if pred.channels() != 3 || !pred.same_shape(target) {
        return Err(Error::dims(
            "two 3-channel maps of equal size",
            format!("{} and {}", pred.shape_string(), target.shape_string()),
        ));
    }
    Ok(())
}

/// `10·log10(1 / MSE)` with peak 1; [`PSNR_CAP`] when the images are identical.
pub fn psnr_l(h: &HdrImage, gt: &HdrImage) -> Result<f64> {
    check_same((h.width(), h.height()), (gt.width(), gt.height()))?;
    let mse = h
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / h.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// PSNR after μ-law compression of both images.
pub fn psnr_mu(h: &HdrImage, gt: &HdrImage, tm: &TonemapConfig) -> Result<f64> {
    check_same((h.width(), h.height()), (gt.width(), gt.height()))?;
    psnr_l(&tonemap_mu(h, tm), &tonemap_mu(gt, tm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_hdr(w: usize, h: usize, seed: u64) -> HdrImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HdrImage::new(w, h, (0..w * h * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let a = random_hdr(12, 10, 1);
        let l = loss(&a, &a, DEFAULT_LAMBDA, &TonemapConfig::default()).unwrap();
        assert_eq!(l.total, 0.0);
        assert_eq!(l.lambda, DEFAULT_LAMBDA);
    }

    #[test]
    fn lambda_zero_keeps_only_mse() {
        let (a, b) = (random_hdr(12, 10, 2), random_hdr(12, 10, 3));
        let l = loss(&a, &b, 0.0, &TonemapConfig::default()).unwrap();
        assert_eq!(l.total, l.mse_term);
        assert!(l.st_term > 0.0);
    }

    #[test]
    fn constant_images_use_scalar_oracle() {
        let tm = TonemapConfig::default();
        let a = HdrImage::filled(8, 8, [0.5; 3]).unwrap();
        let b = HdrImage::filled(8, 8, [0.6; 3]).unwrap();
        let l = loss(&a, &b, DEFAULT_LAMBDA, &tm).unwrap();
        assert_eq!(l.st_term, 0.0);
        let t = |h: f64| (1.0 + 5000.0 * h).ln() / 5001f64.ln();
        let want = (t(0.5) - t(0.6)).powi(2);
        assert!((l.mse_term - want).abs() < 1e-15);
        assert_eq!(l.total, l.mse_term);
    }

    #[test]
    fn psnr_closed_forms() {
        let a = random_hdr(8, 8, 4);
        assert_eq!(psnr_l(&a, &a).unwrap(), PSNR_CAP);
        let zero = HdrImage::filled(4, 4, [0.0; 3]).unwrap();
        let tenth = HdrImage::filled(4, 4, [0.1; 3]).unwrap();
        let hundredth = HdrImage::filled(4, 4, [0.01; 3]).unwrap();
        assert!((psnr_l(&zero, &tenth).unwrap() - 20.0).abs() < 1e-9);
        assert!((psnr_l(&zero, &hundredth).unwrap() - 40.0).abs() < 1e-9);
        let one = HdrImage::filled(4, 4, [1.0; 3]).unwrap();
        assert_eq!(psnr_mu(&zero, &one, &TonemapConfig::default()).unwrap(), 0.0);
        assert_eq!(psnr_l(&zero, &random_hdr(8, 8, 1)).unwrap_err().code(), "dimension_mismatch");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let tm = TonemapConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (w, h) = (10, 9);
        let pred = FeatureMap::new(3, h, w, (0..3 * w * h).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap();
        let target = FeatureMap::new(3, h, w, (0..3 * w * h).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap();
        let (_, grad) = loss_and_gradient(&pred, &target, 0.5, &tm).unwrap();
        let eps = 1e-7;
        for i in (0..pred.data().len()).step_by(7) {
            let mut up = pred.clone();
            up.data_mut()[i] += eps;
            let mut dn = pred.clone();
            dn.data_mut()[i] -= eps;
            let fd = (loss_planar(&up, &target, 0.5, &tm).unwrap().total
                - loss_planar(&dn, &target, 0.5, &tm).unwrap().total)
                / (2.0 * eps);
            let g = grad.data()[i];
            assert!((fd - g).abs() <= 1e-5 * fd.abs().max(g.abs()).max(1e-6), "{i}: {fd} vs {g}");
        }
    }

    proptest! {
        #[test]
        fn psnr_falls_as_error_grows(e1 in 1e-4f64..0.5, e2 in 1e-4f64..0.5) {
            prop_assume!((e1 - e2).abs() > 1e-9);
            let zero = HdrImage::filled(4, 4, [0.0; 3]).unwrap();
            let p = |e: f64| psnr_l(&zero, &HdrImage::filled(4, 4, [e; 3]).unwrap()).unwrap();
            let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
            prop_assert!(p(lo) > p(hi));
        }

        #[test]
        fn total_dominates_mse(seed in any::<u64>(), lambda in 0.0f64..1.0) {
            let (a, b) = (random_hdr(8, 8, seed), random_hdr(8, 8, seed ^ 1));
            let l = loss(&a, &b, lambda, &TonemapConfig::default()).unwrap();
            prop_assert!(l.total >= l.mse_term);
            prop_assert_eq!(l.total, l.mse_term + lambda * l.st_term);
        }

        #[test]
        fn psnr_mu_is_psnr_of_tonemapped(seed in any::<u64>()) {
            let tm = TonemapConfig::default();
            let (a, b) = (random_hdr(6, 6, seed), random_hdr(6, 6, seed.wrapping_add(7)));
            let lhs = psnr_mu(&a, &b, &tm).unwrap();
            let rhs = psnr_l(&tonemap_mu(&a, &tm), &tonemap_mu(&b, &tm)).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
