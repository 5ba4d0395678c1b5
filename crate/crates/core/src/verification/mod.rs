//! Synthetic scenes, finite-difference gradient checks and a small trainer.
//!
//! Everything here runs on the tiny network configuration so that checks
//! finish in seconds to minutes on a laptop.

mod gradcheck;
mod scene;
mod train;

pub use gradcheck::{grad_check, grad_check_indices, relative_error, sample_params, GradCheckReport, Probe, DEFAULT_PROBES};
pub use scene::{default_scene, synth_scene, SynthScene, DEFAULT_SCENE, SCENE_EVS};
pub use train::{cosine_lr, train_from, train_toy, AdamW, TrainConfig, TrainRecord, TrainResult, TrainingPair};
