//! Domain lifting, μ-law range compression and the 7-channel network input.

use crate::error::{Error, Result};
use crate::image_io::{HdrImage, LdrImage};
use crate::structure_tensor::{self, StMap, DEFAULT_RHO};

pub const DEFAULT_MU: f64 = 5000.0;
pub const DEFAULT_GAMMA: f64 = 2.2;

/// Channels in an [`InputStack`].
pub const INPUT_CHANNELS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TonemapConfig {
    mu: f64,
    gamma: f64,
}

impl Default for TonemapConfig {
    fn default() -> Self {
        TonemapConfig {
            mu: DEFAULT_MU,
            gamma: DEFAULT_GAMMA,
        }
    }
}

impl TonemapConfig {
    pub fn new(mu: f64, gamma: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::InvalidParameter(format!("mu must be positive, got {mu}")));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
        }
        Ok(TonemapConfig { mu, gamma })
    }

    pub fn with_mu(mu: f64) -> Result<Self> {
        TonemapConfig::new(mu, DEFAULT_GAMMA)
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `log(1 + μh) / log(1 + μ)`. The log base cancels in the ratio.
    #[inline]
    pub fn compress(&self, h: f64) -> f64 {
        (self.mu * h).ln_1p() / self.mu.ln_1p()
    }

    /// Derivative of [`compress`](Self::compress) with respect to `h`.
    #[inline]
    pub fn compress_slope(&self, h: f64) -> f64 {
        self.mu / ((1.0 + self.mu * h) * self.mu.ln_1p())
    }
}

/// `H = I^γ / t` per sample. Values above 1 are kept.
pub fn ldr_to_hdr(img: &LdrImage, gamma: f64) -> Result<HdrImage> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }
    let t = img.t();
    let data = img.data().iter().map(|&i| i.powf(gamma) / t).collect();
    HdrImage::new(img.width(), img.height(), data)
}

pub fn tonemap_mu(img: &HdrImage, cfg: &TonemapConfig) -> HdrImage {
    img.map(|h| cfg.compress(h))
        .expect("mu-law maps non-negative samples to non-negative samples")
}

/// Channel-major `7 × H × W` network input: LDR RGB, lifted RGB, ST map.
#[derive(Debug, Clone, PartialEq)]
pub struct InputStack {
    width: usize,
    height: usize,
    data: Vec<f64>,
    ev: f64,
}

impl InputStack {
    /// Wraps already assembled channel-major data.
    pub fn from_planar(width: usize, height: usize, data: Vec<f64>, ev: f64) -> Result<Self> {
        if data.len() != INPUT_CHANNELS * width * height {
            return Err(Error::dims(
                format!("{} samples", INPUT_CHANNELS * width * height),
                format!("{} samples", data.len()),
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample { index });
        }
        Ok(InputStack {
            width,
            height,
            data,
            ev,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn ev(&self) -> f64 {
        self.ev
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }
}

pub fn assemble_input(ldr: &LdrImage, hdr: &HdrImage, st: &StMap) -> Result<InputStack> {
    let (w, h) = (ldr.width(), ldr.height());
    for (what, (ow, oh)) in [("hdr", (hdr.width(), hdr.height())), ("st map", (st.width(), st.height()))] {
        if (ow, oh) != (w, h) {
            return Err(Error::dims(format!("{what} {w}x{h}"), format!("{ow}x{oh}")));
        }
    }
    let n = w * h;
    let mut data = Vec::with_capacity(INPUT_CHANNELS * n);
    for c in 0..3 {
        data.extend(ldr.data().iter().skip(c).step_by(3));
    }
    for c in 0..3 {
        data.extend(hdr.data().iter().skip(c).step_by(3));
    }
    data.extend_from_slice(st.data());
    Ok(InputStack {
        width: w,
        height: h,
        data,
        ev: ldr.ev(),
    })
}

/// Lift, compute the ST map from LDR luminance, and assemble.
pub fn prepare_input(ldr: &LdrImage, gamma: f64) -> Result<InputStack> {
    let hdr = ldr_to_hdr(ldr, gamma)?;
    let lum = structure_tensor::luminance_of(ldr.data(), ldr.width(), ldr.height());
    let st = structure_tensor::st_map_of_plane(&lum, DEFAULT_RHO)?;
    assemble_input(ldr, &hdr, &st)
}
