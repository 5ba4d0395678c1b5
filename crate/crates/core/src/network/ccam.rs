//! Cross channel attention.
//!
//! Queries come from the reference features, keys and values from the other
//! input. Spatial dimensions are flattened and the attention is taken over
//! channels: `A = softmax_rows(Q Kᵀ / sqrt(H·W))` is `C × C` and the output
//! is `A V` reshaped back to `C × H × W`.

use super::layers::{dot, masked_softmax, softmax_backward};
use super::params::LinearSlot;
use super::{FeatureMap, NetworkParams};
use crate::error::{Error, Result};

/// `Y = W X + b` on channel-major data (a 1×1 convolution).
fn channel_mix(x: &[f64], w: &[f64], b: &[f64], c: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; c * n];
    for o in 0..c {
        let yr = &mut y[o * n..(o + 1) * n];
        yr.fill(b[o]);
        for i in 0..c {
            let wv = w[o * c + i];
            for (a, &v) in yr.iter_mut().zip(&x[i * n..(i + 1) * n]) {
                *a += wv * v;
            }
        }
    }
    y
}

fn channel_mix_backward(x: &[f64], w: &[f64], c: usize, n: usize, dy: &[f64], dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; c * n];
    for o in 0..c {
        let g = &dy[o * n..(o + 1) * n];
        db[o] += g.iter().sum::<f64>();
        for i in 0..c {
            let xi = &x[i * n..(i + 1) * n];
            dw[o * c + i] += dot(g, xi);
            let wv = w[o * c + i];
            for (d, &gv) in dx[i * n..(i + 1) * n].iter_mut().zip(g) {
                *d += wv * gv;
            }
        }
    }
    dx
}

pub(crate) struct CcamCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
}

fn check_pair(phi1: &FeatureMap, phi2: &FeatureMap, c: usize) -> Result<()> {
    if !phi1.same_shape(phi2) || phi1.channels() != c {
        return Err(Error::dims(
            format!("two {c}-channel maps of equal size"),
            format!("{} and {}", phi1.shape_string(), phi2.shape_string()),
        ));
    }
    Ok(())
}

pub(crate) fn ccam_forward(
    p: &NetworkParams,
    phi1: &FeatureMap,
    phi2: &FeatureMap,
) -> (FeatureMap, CcamCache) {
    let l = p.layout();
    let c = phi1.channels();
    let n = phi1.height() * phi1.width();
    let mix = |slot: &LinearSlot, x: &FeatureMap| channel_mix(x.data(), p.slice(slot.weight), p.slice(slot.bias), c, n);
    let q = mix(&l.query, phi2);
    let k = mix(&l.key, phi1);
    let v = mix(&l.value, phi1);

    let scale = 1.0 / (n as f64).sqrt();
    let mut attn = vec![0.0; c * c];
    for a in 0..c {
        let qa = &q[a * n..(a + 1) * n];
        for b in 0..c {
            let kb = &k[b * n..(b + 1) * n];
            attn[a * c + b] = scale * dot(qa, kb);
        }
        masked_softmax(&mut attn[a * c..(a + 1) * c], |_| true);
    }

    let mut out = vec![0.0; c * n];
    for a in 0..c {
        let row = &mut out[a * n..(a + 1) * n];
        for b in 0..c {
            let wv = attn[a * c + b];
            for (o, &vv) in row.iter_mut().zip(&v[b * n..(b + 1) * n]) {
                *o += wv * vv;
            }
        }
    }
    let out = FeatureMap::new(c, phi1.height(), phi1.width(), out).expect("shape is consistent");
    (out, CcamCache { q, k, v, attn })
}

/// Returns `(dphi1, dphi2)`; parameter gradients go into `grads`.
pub(crate) fn ccam_backward(
    p: &NetworkParams,
    phi1: &FeatureMap,
    phi2: &FeatureMap,
    cache: &CcamCache,
    dout: &FeatureMap,
    grads: &mut [f64],
) -> (FeatureMap, FeatureMap) {
    let l = p.layout();
    let c = phi1.channels();
    let n = phi1.height() * phi1.width();
    let scale = 1.0 / (n as f64).sqrt();
    let g = dout.data();

    // out = A V
    let mut d_attn = vec![0.0; c * c];
    let mut dv = vec![0.0; c * n];
    for a in 0..c {
        let ga = &g[a * n..(a + 1) * n];
        for b in 0..c {
            let vb = &cache.v[b * n..(b + 1) * n];
            d_attn[a * c + b] = dot(ga, vb);
            let wv = cache.attn[a * c + b];
            for (d, &gv) in dv[b * n..(b + 1) * n].iter_mut().zip(ga) {
                *d += wv * gv;
            }
        }
    }
    let mut d_logits = vec![0.0; c * c];
    for a in 0..c {
        softmax_backward(
            &cache.attn[a * c..(a + 1) * c],
            &d_attn[a * c..(a + 1) * c],
            &mut d_logits[a * c..(a + 1) * c],
        );
    }
    let mut dq = vec![0.0; c * n];
    let mut dk = vec![0.0; c * n];
    for a in 0..c {
        for b in 0..c {
            let s = scale * d_logits[a * c + b];
            if s == 0.0 {
                continue;
            }
            for (d, &kv) in dq[a * n..(a + 1) * n].iter_mut().zip(&cache.k[b * n..(b + 1) * n]) {
                *d += s * kv;
            }
            for (d, &qv) in dk[b * n..(b + 1) * n].iter_mut().zip(&cache.q[a * n..(a + 1) * n]) {
                *d += s * qv;
            }
        }
    }

    let mut back = |slot: &LinearSlot, x: &FeatureMap, dy: &[f64]| {
        let (wo, wl) = slot.weight;
        let (bo, bl) = slot.bias;
        let mut dw = vec![0.0; wl];
        let mut db = vec![0.0; bl];
        let dx = channel_mix_backward(x.data(), p.slice(slot.weight), c, n, dy, &mut dw, &mut db);
        grads[wo..wo + wl].iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        grads[bo..bo + bl].iter_mut().zip(&db).for_each(|(a, b)| *a += b);
        dx
    };
    let dphi2 = back(&l.query, phi2, &dq);
    let mut dphi1 = back(&l.key, phi1, &dk);
    let dphi1_v = back(&l.value, phi1, &dv);
    dphi1.iter_mut().zip(&dphi1_v).for_each(|(a, b)| *a += b);
    let (h, w) = (phi1.height(), phi1.width());
    (
        FeatureMap::new(c, h, w, dphi1).expect("shape is consistent"),
        FeatureMap::new(c, h, w, dphi2).expect("shape is consistent"),
    )
}

/// Attends from the reference features `phi2` to `phi1`.
pub fn ccam(phi1: &FeatureMap, phi2: &FeatureMap, p: &NetworkParams) -> Result<FeatureMap> {
    Ok(ccam_attention(phi1, phi2, p)?.0)
}

/// Like [`ccam`], also returning the row-major `C × C` attention matrix.
pub fn ccam_attention(phi1: &FeatureMap, phi2: &FeatureMap, p: &NetworkParams) -> Result<(FeatureMap, Vec<f64>)> {
    check_pair(phi1, phi2, p.config().feat_channels)?;
    let (out, cache) = ccam_forward(p, phi1, phi2);
    Ok((out, cache.attn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity_params(cfg: NetworkConfig) -> NetworkParams {
        let mut p = NetworkParams::init(cfg, 1).unwrap();
        let c = cfg.feat_channels;
        for name in ["ccam.query", "ccam.key", "ccam.value"] {
            let w = p.tensor(&format!("{name}.weight")).unwrap().range();
            let vals = &mut p.values_mut()[w];
            vals.fill(0.0);
            for i in 0..c {
                vals[i * c + i] = 1.0;
            }
        }
        p
    }

    #[test]
    fn identical_channels_pass_through() {
        let cfg = NetworkConfig::tiny();
        let p = identity_params(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let phi1 = FeatureMap::new(8, 4, 4, base.iter().cycle().take(8 * 16).copied().collect()).unwrap();
        let phi2 = FeatureMap::new(8, 4, 4, (0..128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let out = ccam(&phi1, &phi2, &p).unwrap();
        for c in 0..8 {
            for (a, b) in out.plane(c).iter().zip(&base) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_logits_average_the_values() {
        // zero queries give equal logits, so every output channel is the mean of phi1's channels
        let cfg = NetworkConfig::tiny();
        let p = identity_params(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let phi1 = FeatureMap::new(8, 4, 4, (0..128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let phi2 = FeatureMap::zeros(8, 4, 4);
        let (out, attn) = ccam_attention(&phi1, &phi2, &p).unwrap();
        assert!(attn.iter().all(|&a| (a - 0.125).abs() < 1e-15));
        for i in 0..16 {
            let mean = (0..8).map(|c| phi1.plane(c)[i]).sum::<f64>() / 8.0;
            for c in 0..8 {
                assert!((out.plane(c)[i] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_channel_hand_computed_case() {
        // phi1 channels [1,3] and [5,7]; zero queries -> each output is [3,5]
        let cfg = NetworkConfig {
            feat_channels: 2,
            heads: 1,
            ..NetworkConfig::tiny()
        };
        let p = identity_params(cfg);
        let phi1 = FeatureMap::new(2, 1, 2, vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let phi2 = FeatureMap::zeros(2, 1, 2);
        let out = ccam(&phi1, &phi2, &p).unwrap();
        assert_eq!(out.data(), &[3.0, 5.0, 3.0, 5.0]);
    }

    #[test]
    fn rows_are_stochastic_and_shapes_checked() {
        let cfg = NetworkConfig::tiny();
        let p = NetworkParams::init(cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = || FeatureMap::new(8, 4, 8, (0..256).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let (a, b) = (m(), m());
        let (_, attn) = ccam_attention(&a, &b, &p).unwrap();
        for row in attn.chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let wrong = FeatureMap::zeros(8, 8, 4);
        assert_eq!(ccam(&a, &wrong, &p).unwrap_err().code(), "dimension_mismatch");
    }
}
