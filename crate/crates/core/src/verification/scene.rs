use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image_io::{HdrImage, LdrImage};
use crate::radiometry::DEFAULT_GAMMA;

/// Exposure values of the rendered stack, darkest first.
pub const SCENE_EVS: [f64; 3] = [-2.0, 0.0, 2.0];

const MIN_SIDE: usize = 16;

/// Seed, side length and object displacement of the scene used for the
/// gradient check and the overfit run.
pub const DEFAULT_SCENE: (u64, usize, i64) = (0, 16, 2);
const OBJECT_RADIANCE: [f64; 3] = [0.9, 0.85, 0.8];
const TINT: [f64; 3] = [1.0, 0.9, 0.75];

/// A bracketed stack of one scene with a moving foreground object.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub ldr_stack: Vec<LdrImage>,
    /// Radiance of the static scene as seen by the EV 0 exposure.
    pub gt: HdrImage,
    /// Horizontal object offset in pixels for each exposure.
    pub motion: Vec<i64>,
    pub seed: u64,
}

impl SynthScene {
    pub fn width(&self) -> usize {
        self.gt.width()
    }

    pub fn height(&self) -> usize {
        self.gt.height()
    }

    pub fn exposure(&self, ev: f64) -> Option<&LdrImage> {
        self.ldr_stack.iter().find(|l| l.ev() == ev)
    }
}

fn render(width: usize, height: usize, background: &[f64], offset: i64) -> Vec<f64> {
    let side = (width.min(height) / 4).max(2) as i64;
    let x0 = (width as i64 - side) / 2 + offset;
    let y0 = (height as i64 - side) / 2;
    let mut h = background.to_vec();
    for y in 0..height as i64 {
        for x in 0..width as i64 {
            if (x0..x0 + side).contains(&x) && (y0..y0 + side).contains(&y) {
                let i = (y as usize * width + x as usize) * 3;
                h[i..i + 3].copy_from_slice(&OBJECT_RADIANCE);
            }
        }
    }
    h
}

pub fn default_scene() -> Result<SynthScene> {
    let (seed, side, displacement) = DEFAULT_SCENE;
    synth_scene(seed, side, side, displacement)
}

/// Renders a smooth textured background with a bright square that moves by
/// `-displacement`, `0`, `+displacement` pixels across the three exposures.
pub fn synth_scene(seed: u64, width: usize, height: usize, displacement: i64) -> Result<SynthScene> {
    if width < MIN_SIDE || height < MIN_SIDE || !width.is_multiple_of(8) || !height.is_multiple_of(8) {
        return Err(Error::InvalidParameter(format!(
            "scene sides must be multiples of 8 and at least {MIN_SIDE}, got {width}x{height}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut background = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        for x in 0..width {
            let u = x as f64 / (width - 1) as f64;
            let v = y as f64 / (height - 1) as f64;
            let base = 0.06 + 0.3 * u + 0.12 * v;
            let texture = rng.random_range(-0.03..0.03);
            for tint in TINT {
                background.push((base + texture) * tint);
            }
        }
    }
    let motion = vec![-displacement, 0, displacement];
    let gt = HdrImage::new(width, height, render(width, height, &background, 0))?;
    let ldr_stack = SCENE_EVS
        .iter()
        .zip(&motion)
        .map(|(&ev, &offset)| {
            let t = ev.exp2();
            let data = render(width, height, &background, offset)
                .into_iter()
                .map(|h| (h * t).powf(1.0 / DEFAULT_GAMMA).clamp(0.0, 1.0))
                .collect();
            LdrImage::new(width, height, data, ev)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthScene {
        ldr_stack,
        gt,
        motion,
        seed,
    })
}
