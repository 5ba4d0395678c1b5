//! The fusion network: a dilated-convolution encoder shared by both inputs,
//! cross channel attention between them, and a decoder of three windowed
//! self-attention blocks followed by a fusion convolution and an RGB head.
//!
//! Everything runs in `f64` on the CPU. Each layer has a forward kernel and a
//! hand-written backward kernel; [`model::forward_train`] keeps the
//! activations that [`model::backward`] needs.

mod ccam;
mod config;
mod layers;
pub mod model;
mod params;
mod swin;

pub use ccam::{ccam, ccam_attention};
pub use config::{NetworkConfig, ENCODER_DILATIONS, LEAKY_SLOPE};
pub use layers::{conv2d, ConvKernel};
pub use model::{can_encode, decode, forward, forward_planar};
pub use params::{expected_param_count, Init, NetworkParams, TensorInfo};
pub use swin::{swin_attention, swin_block};

use crate::error::{Error, Result};

/// Channel-major `C × H × W` activations.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidParameter(format!(
                "feature map dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::dims(channels * height * width, data.len()));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.channels, self.height, self.width)
    }

    /// Stacks maps along the channel axis.
    pub fn concat(parts: &[&FeatureMap]) -> Result<FeatureMap> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidParameter("nothing to concatenate".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if (p.height, p.width) != (h, w) {
                return Err(Error::dims(format!("spatial {h}x{w}"), format!("{}x{}", p.height, p.width)));
            }
            data.extend_from_slice(&p.data);
            channels += p.channels;
        }
        Ok(FeatureMap {
            channels,
            height: h,
            width: w,
            data,
        })
    }

    /// Channels `[start, start + count)` as a new map.
    pub fn slice_channels(&self, start: usize, count: usize) -> FeatureMap {
        let n = self.height * self.width;
        FeatureMap {
            channels: count,
            height: self.height,
            width: self.width,
            data: self.data[start * n..(start + count) * n].to_vec(),
        }
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> FeatureMap {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Channel-major to token-major (`(H·W) × C`).
    pub(crate) fn to_tokens(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let c = self.channels;
        let mut t = vec![0.0; n * c];
        for ch in 0..c {
            for i in 0..n {
                t[i * c + ch] = self.data[ch * n + i];
            }
        }
        t
    }

    pub(crate) fn from_tokens(tokens: &[f64], channels: usize, height: usize, width: usize) -> FeatureMap {
        let n = height * width;
        let mut data = vec![0.0; n * channels];
        for i in 0..n {
            for ch in 0..channels {
                data[ch * n + i] = tokens[i * channels + ch];
            }
        }
        FeatureMap {
            channels,
            height,
            width,
            data,
        }
    }
}
