use std::f64::consts::PI;

use super::scene::SynthScene;
use crate::error::{Error, Result};
use crate::loss::{loss_and_gradient, loss_planar, LossValue, DEFAULT_LAMBDA};
use crate::network::model::{backward, forward_train};
use crate::network::{forward_planar, FeatureMap, NetworkConfig, NetworkParams};
use crate::radiometry::{prepare_input, InputStack, TonemapConfig, DEFAULT_GAMMA};

/// The two network inputs built from a scene (EV −2 and the EV 0 reference)
/// and the ground-truth target.
#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub x1: InputStack,
    pub x2: InputStack,
    pub target: FeatureMap,
    pub lambda: f64,
    pub tonemap: TonemapConfig,
}

impl TrainingPair {
    pub fn from_scene(scene: &SynthScene, lambda: f64) -> Result<Self> {
        let pick = |ev: f64| {
            scene
                .exposure(ev)
                .ok_or_else(|| Error::InvalidParameter(format!("scene has no EV {ev} exposure")))
        };
        let x1 = prepare_input(pick(-2.0)?, DEFAULT_GAMMA)?;
        let x2 = prepare_input(pick(0.0)?, DEFAULT_GAMMA)?;
        let target = FeatureMap::new(3, scene.height(), scene.width(), scene.gt.to_planar())?;
        Ok(TrainingPair {
            x1,
            x2,
            target,
            lambda,
            tonemap: TonemapConfig::default(),
        })
    }

    pub fn loss(&self, p: &NetworkParams) -> Result<LossValue> {
        let out = forward_planar(&self.x1, &self.x2, p)?;
        loss_planar(&out, &self.target, self.lambda, &self.tonemap)
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, p: &NetworkParams) -> Result<(LossValue, Vec<f64>)> {
        let (out, cache) = forward_train(&self.x1, &self.x2, p)?;
        let (value, d_out) = loss_and_gradient(&out, &self.target, self.lambda, &self.tonemap)?;
        Ok((value, backward(p, &cache, &d_out)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub lambda: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    /// Seed of the parameter initialization.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            lr_max: 1e-4,
            lr_min: 1e-8,
            lambda: DEFAULT_LAMBDA,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-2,
            eps: 1e-8,
            seed: 0,
        }
    }
}

/// Cosine annealing from `max` at step 0 towards `min` at `steps`.
pub fn cosine_lr(step: usize, steps: usize, max: f64, min: f64) -> f64 {
    if steps == 0 {
        return max;
    }
    min + 0.5 * (max - min) * (1.0 + (PI * step as f64 / steps as f64).cos())
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
    eps: f64,
}

impl AdamW {
    pub fn new(n: usize, cfg: &TrainConfig) -> Self {
        AdamW {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            weight_decay: cfg.weight_decay,
            eps: cfg.eps,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: LossValue,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: NetworkParams,
    /// Loss before each update.
    pub curve: Vec<TrainRecord>,
    /// Loss after the last update.
    pub final_loss: LossValue,
}

impl TrainResult {
    /// Lowest loss seen so far at each step.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.curve
            .iter()
            .map(|r| {
                best = best.min(r.loss.total);
                best
            })
            .collect()
    }

    /// `final / initial` total loss; 1 when no step was taken.
    pub fn reduction_ratio(&self) -> f64 {
        match self.curve.first() {
            Some(first) => self.final_loss.total / first.loss.total,
            None => 1.0,
        }
    }
}

/// Overfits a freshly initialized tiny network to one scene.
pub fn train_toy(scene: &SynthScene, cfg: &TrainConfig) -> Result<TrainResult> {
    train_from(NetworkParams::init(NetworkConfig::tiny(), cfg.seed)?, scene, cfg)
}

/// Trains starting from `params`.
pub fn train_from(mut params: NetworkParams, scene: &SynthScene, cfg: &TrainConfig) -> Result<TrainResult> {
    let pair = TrainingPair::from_scene(scene, cfg.lambda)?;
    let mut opt = AdamW::new(params.count(), cfg);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (loss, grads) = pair.loss_and_grad(&params)?;
        if !loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step });
        }
        let lr = cosine_lr(step, cfg.steps, cfg.lr_max, cfg.lr_min);
        opt.step(params.values_mut(), &grads, lr);
        curve.push(TrainRecord { step, lr, loss });
    }
    let final_loss = pair.loss(&params)?;
    if !final_loss.total.is_finite() {
        return Err(Error::Diverged { step: cfg.steps });
    }
    Ok(TrainResult {
        params,
        curve,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verification::synth_scene;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-4, 1e-8), 1e-4);
        assert!((cosine_lr(50, 100, 1e-4, 1e-8) - 0.5 * (1e-4 + 1e-8)).abs() < 1e-18);
        assert!((cosine_lr(100, 100, 1e-4, 1e-8) - 1e-8).abs() < 1e-20);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(2, &cfg);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[3.0, -0.5], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let cfg = TrainConfig::default();
        let mut opt = AdamW::new(1, &cfg);
        let mut p = vec![2.0];
        opt.step(&mut p, &[0.0], 0.5);
        assert_eq!(p[0], 2.0 - 0.5 * 1e-2 * 2.0);
    }

    #[test]
    fn zero_steps_leave_params_alone() {
        let scene = synth_scene(0, 16, 16, 2).unwrap();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let r = train_toy(&scene, &cfg).unwrap();
        assert!(r.curve.is_empty());
        assert_eq!(r.params, NetworkParams::init(NetworkConfig::tiny(), 0).unwrap());
        assert_eq!(r.reduction_ratio(), 1.0);
    }

    #[test]
    fn short_runs_are_reproducible_and_envelope_is_monotone() {
        let scene = synth_scene(0, 16, 16, 2).unwrap();
        let cfg = TrainConfig {
            steps: 5,
            ..TrainConfig::default()
        };
        let a = train_toy(&scene, &cfg).unwrap();
        let b = train_toy(&scene, &cfg).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.params, b.params);
        assert!(a.best_so_far().windows(2).all(|w| w[1] <= w[0]));
        assert!(a.final_loss.total < a.curve[0].loss.total);
    }
}
