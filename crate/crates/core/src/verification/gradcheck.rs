use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::scene::SynthScene;
use super::train::TrainingPair;
use crate::error::{Error, Result};
use crate::loss::DEFAULT_LAMBDA;
use crate::network::NetworkParams;

/// Parameters compared per check.
pub const DEFAULT_PROBES: usize = 256;

/// Analytic against central-difference gradient for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub index: usize,
    pub path: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param_path: String,
    pub epsilon: f64,
    pub probes: Vec<Probe>,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// `count` distinct parameter indices (all of them if there are fewer): up
/// to two from every tensor as the budget allows, the rest uniformly at
/// random. Sorted.
pub fn sample_params(p: &NetworkParams, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = vec![false; p.count()];
    let per_tensor = (count / p.tensors().len()).min(2);
    for t in p.tensors() {
        for i in sample(&mut rng, t.len(), t.len().min(per_tensor)) {
            picked[t.offset + i] = true;
        }
    }
    let have = picked.iter().filter(|&&b| b).count();
    let want = count.min(p.count()).saturating_sub(have);
    let rest: Vec<usize> = (0..p.count()).filter(|&i| !picked[i]).collect();
    for i in sample(&mut rng, rest.len(), want.min(rest.len())) {
        picked[rest[i]] = true;
    }
    (0..p.count()).filter(|&i| picked[i]).collect()
}

/// Compares backpropagated gradients of the total loss on the scene's
/// (EV −2, EV 0) pair against central differences on `DEFAULT_PROBES`
/// sampled parameters.
pub fn grad_check(p: &NetworkParams, scene: &SynthScene, epsilon: f64) -> Result<GradCheckReport> {
    grad_check_indices(p, scene, epsilon, &sample_params(p, DEFAULT_PROBES, p.seed()))
}

pub fn grad_check_indices(
    p: &NetworkParams,
    scene: &SynthScene,
    epsilon: f64,
    indices: &[usize],
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= p.count()) {
        return Err(Error::InvalidParameter(format!("parameter index {bad} out of range")));
    }
    let pair = TrainingPair::from_scene(scene, DEFAULT_LAMBDA)?;
    let (base, grads) = pair.loss_and_grad(p)?;
    if !base.total.is_finite() {
        return Err(Error::Diverged { step: 0 });
    }
    let probes = indices
        .par_iter()
        .map(|&index| -> Result<Probe> {
            let mut q = p.clone();
            let theta = p.values()[index];
            q.values_mut()[index] = theta + epsilon;
            let up = pair.loss(&q)?.total;
            q.values_mut()[index] = theta - epsilon;
            let down = pair.loss(&q)?.total;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Diverged { step: 0 });
            }
            let numeric = (up - down) / (2.0 * epsilon);
            let analytic = grads[index];
            Ok(Probe {
                index,
                path: p.path_of(index),
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let worst = probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error));
    Ok(GradCheckReport {
        max_rel_error: worst.map_or(0.0, |w| w.rel_error),
        worst_param_path: worst.map_or_else(String::new, |w| w.path.clone()),
        epsilon,
        probes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;
    use crate::verification::synth_scene;

    #[test]
    fn sample_covers_every_tensor() {
        let p = NetworkParams::init(NetworkConfig::tiny(), 1).unwrap();
        let idx = sample_params(&p, DEFAULT_PROBES, 1);
        assert_eq!(idx.len(), DEFAULT_PROBES);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        for t in p.tensors() {
            assert!(idx.iter().any(|i| t.range().contains(i)), "{}", t.name);
        }
        assert_eq!(idx, sample_params(&p, DEFAULT_PROBES, 1));
        assert_eq!(sample_params(&p, 20, 1).len(), 20);
        assert_eq!(sample_params(&p, usize::MAX, 1).len(), p.count());
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1e-9, 0.0), 0.1);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }

    #[test]
    fn small_step_check_agrees() {
        let p = NetworkParams::init(NetworkConfig::tiny(), 2).unwrap();
        let scene = synth_scene(2, 16, 16, 2).unwrap();
        let idx = sample_params(&p, 40, 2);
        let r = grad_check_indices(&p, &scene, 1e-5, &idx).unwrap();
        assert_eq!(r.probes.len(), idx.len());
        assert!(r.max_rel_error < 1e-3, "{} at {}", r.max_rel_error, r.worst_param_path);
    }

    #[test]
    fn disconnected_channel_has_zero_gradient() {
        let mut p = NetworkParams::init(NetworkConfig::tiny(), 4).unwrap();
        let c = p.config().feat_channels;
        let head = p.tensor("head.weight").unwrap().range();
        // cut fusion channel 0 off from every head output
        for o in 0..3 {
            let start = head.start + o * c * 9;
            p.values_mut()[start..start + 9].fill(0.0);
        }
        let bias = p.tensor("decoder.fusion.bias").unwrap().offset;
        let r = grad_check_indices(&p, &synth_scene(4, 16, 16, 2).unwrap(), 1e-3, &[bias]).unwrap();
        assert_eq!((r.probes[0].analytic, r.probes[0].numeric), (0.0, 0.0));
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn truncation_error_is_second_order() {
        let p = NetworkParams::init(NetworkConfig::tiny(), 3).unwrap();
        let scene = synth_scene(3, 16, 16, 2).unwrap();
        let head = p.tensor("head.bias").unwrap().offset;
        let err = |eps: f64| {
            let probe = &grad_check_indices(&p, &scene, eps, &[head]).unwrap().probes[0];
            (probe.numeric - probe.analytic).abs()
        };
        let ratio = err(2e-2) / err(1e-2);
        assert!((3.5..4.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn rejects_bad_epsilon() {
        let p = NetworkParams::init(NetworkConfig::tiny(), 2).unwrap();
        let scene = synth_scene(2, 16, 16, 2).unwrap();
        assert!(grad_check_indices(&p, &scene, 0.0, &[0]).is_err());
        assert!(grad_check_indices(&p, &scene, 1e-3, &[p.count()]).is_err());
    }
}
