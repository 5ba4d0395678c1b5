//! Dual-input fusion and sequential fusion of any number of exposures.
//!
//! With more than two exposures the middle one is the first reference. The
//! darker exposures are fused in ascending EV order, then the brighter ones,
//! and each intermediate result becomes the next reference as an EV 0
//! pseudo-LDR with a freshly computed structure map.

use std::collections::HashSet;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::image_io::{self, HdrImage, LdrImage};
use crate::network::{forward, NetworkParams};
use crate::radiometry::{ldr_to_hdr, prepare_input, tonemap_mu, TonemapConfig, DEFAULT_GAMMA};

/// Inputs are padded so both sides are multiples of this (and of the window).
pub const PAD_MULTIPLE: usize = 8;

/// Index of the median EV; with an even count, the darker of the two middle
/// values. Ties keep list order.
pub fn select_reference(evs: &[f64]) -> Result<usize> {
    if evs.is_empty() {
        return Err(Error::InvalidJob("no exposures to choose a reference from".into()));
    }
    let mut order: Vec<usize> = (0..evs.len()).collect();
    order.sort_by(|&a, &b| evs[a].total_cmp(&evs[b]).then(a.cmp(&b)));
    Ok(order[(evs.len() - 1) / 2])
}

/// Order in which the non-reference exposures are fused into the reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionPlan {
    pub reference: usize,
    pub order: Vec<usize>,
}

/// Darker exposures ascending, then brighter ones ascending. Equal EVs are
/// placed by their position relative to the reference in the sorted list.
pub fn plan_fusion(evs: &[f64]) -> Result<FusionPlan> {
    let reference = select_reference(evs)?;
    let mut order: Vec<usize> = (0..evs.len()).collect();
    order.sort_by(|&a, &b| evs[a].total_cmp(&evs[b]).then(a.cmp(&b)));
    order.retain(|&i| i != reference);
    Ok(FusionPlan { reference, order })
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn padded_len(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple) * multiple
}

fn pad_reflect(img: &LdrImage, width: usize, height: usize) -> Result<LdrImage> {
    if (width, height) == (img.width(), img.height()) {
        return Ok(img.clone());
    }
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        let sy = reflect(y, img.height());
        for x in 0..width {
            data.extend_from_slice(&img.pixel(reflect(x, img.width()), sy));
        }
    }
    LdrImage::new(width, height, data, img.ev())
}

fn crop(img: HdrImage, width: usize, height: usize) -> Result<HdrImage> {
    if (width, height) == (img.width(), img.height()) {
        return Ok(img);
    }
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        let start = y * img.width() * 3;
        data.extend_from_slice(&img.data()[start..start + width * 3]);
    }
    HdrImage::new(width, height, data)
}

/// Fuses `a` into the reference exposure `reference`.
pub fn fuse_pair(a: &LdrImage, reference: &LdrImage, p: &NetworkParams) -> Result<HdrImage> {
    let (w, h) = (reference.width(), reference.height());
    if (a.width(), a.height()) != (w, h) {
        return Err(Error::dims(format!("{w}x{h}"), format!("{}x{}", a.width(), a.height())));
    }
    let window = p.config().window;
    let multiple = PAD_MULTIPLE / gcd(PAD_MULTIPLE, window) * window;
    let (pw, ph) = (padded_len(w, multiple), padded_len(h, multiple));
    let x1 = prepare_input(&pad_reflect(a, pw, ph)?, DEFAULT_GAMMA)?;
    let x2 = prepare_input(&pad_reflect(reference, pw, ph)?, DEFAULT_GAMMA)?;
    crop(forward(&x1, &x2, p)?, w, h)
}

/// An intermediate result as an EV 0 pseudo-LDR whose lift gives back the
/// clamped radiance.
pub fn as_reference(h: &HdrImage) -> Result<LdrImage> {
    let data = h
        .data()
        .iter()
        .map(|&v| v.clamp(0.0, 1.0).powf(1.0 / DEFAULT_GAMMA))
        .collect();
    LdrImage::new(h.width(), h.height(), data, 0.0)
}

/// Lift of a lone exposure, clamped to `[0, 1]`.
pub fn lift_single(img: &LdrImage) -> Result<HdrImage> {
    ldr_to_hdr(img, DEFAULT_GAMMA)?.map(|v| v.clamp(0.0, 1.0))
}

/// Sequential fusion with a caller-supplied pair fuser, called as
/// `fuse(other, reference)` exactly `N − 1` times.
pub fn fuse_images_with(
    images: &[LdrImage],
    mut fuse: impl FnMut(&LdrImage, &LdrImage) -> Result<HdrImage>,
) -> Result<HdrImage> {
    let evs: Vec<f64> = images.iter().map(LdrImage::ev).collect();
    let plan = plan_fusion(&evs)?;
    let first = &images[plan.reference];
    for img in images {
        if (img.width(), img.height()) != (first.width(), first.height()) {
            return Err(Error::dims(
                format!("{}x{}", first.width(), first.height()),
                format!("{}x{}", img.width(), img.height()),
            ));
        }
    }
    if plan.order.is_empty() {
        return lift_single(first);
    }
    let mut reference = first.clone();
    let mut out = None;
    for &i in &plan.order {
        let fused = fuse(&images[i], &reference)?;
        reference = as_reference(&fused)?;
        out = Some(fused);
    }
    Ok(out.expect("at least one fusion"))
}

pub fn fuse_images(images: &[LdrImage], p: &NetworkParams) -> Result<HdrImage> {
    fuse_images_with(images, |a, r| fuse_pair(a, r, p))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionJob {
    inputs: Vec<(PathBuf, f64)>,
    params_path: PathBuf,
    output_path: PathBuf,
    tonemapped_path: Option<PathBuf>,
}

impl FusionJob {
    pub fn new(
        inputs: Vec<(PathBuf, f64)>,
        params_path: PathBuf,
        output_path: PathBuf,
        tonemapped_path: Option<PathBuf>,
    ) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::InvalidJob("at least one input is required".into()));
        }
        let mut seen = HashSet::new();
        for (path, ev) in &inputs {
            if !ev.is_finite() {
                return Err(Error::InvalidJob(format!("EV of {} is not finite", path.display())));
            }
            if !seen.insert(path) {
                return Err(Error::InvalidJob(format!("{} is listed twice", path.display())));
            }
        }
        Ok(FusionJob {
            inputs,
            params_path,
            output_path,
            tonemapped_path,
        })
    }

    pub fn inputs(&self) -> &[(PathBuf, f64)] {
        &self.inputs
    }

    pub fn params_path(&self) -> &PathBuf {
        &self.params_path
    }

    pub fn output_path(&self) -> &PathBuf {
        &self.output_path
    }

    pub fn emit_tonemapped(&self) -> bool {
        self.tonemapped_path.is_some()
    }

    pub fn tonemapped_path(&self) -> Option<&PathBuf> {
        self.tonemapped_path.as_ref()
    }

    pub fn load_inputs(&self) -> Result<Vec<LdrImage>> {
        self.inputs.iter().map(|(path, ev)| image_io::load_ldr(path, *ev)).collect()
    }
}

/// Loads the job's exposures and fuses them with `p`.
pub fn fuse_sequence(job: &FusionJob, p: &NetworkParams) -> Result<HdrImage> {
    fuse_images(&job.load_inputs()?, p)
}

/// Runs a job end to end: load parameters and inputs, fuse, write outputs.
pub fn run_job(job: &FusionJob) -> Result<HdrImage> {
    let p = NetworkParams::load(&job.params_path)?;
    let out = fuse_sequence(job, &p)?;
    image_io::save_hdr(&out, &job.output_path)?;
    if let Some(path) = &job.tonemapped_path {
        let t = tonemap_mu(&out, &TonemapConfig::default());
        image_io::save_rgb_png(path, t.width(), t.height(), t.data(), 8)?;
    }
    Ok(out)
}
