use crate::error::{Error, Result};
use crate::radiometry::INPUT_CHANNELS;

/// Dilation of each encoder convolution, in order.
pub const ENCODER_DILATIONS: [usize; 3] = [1, 2, 4];

/// Negative slope of every LeakyReLU in the convolutional layers.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Architecture hyperparameters. The decoder runs at twice `feat_channels`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub feat_channels: usize,
    pub window: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::full()
    }
}

impl NetworkConfig {
    /// 64-channel features, 8×8 windows, 4 heads.
    pub fn full() -> Self {
        NetworkConfig {
            in_channels: INPUT_CHANNELS,
            feat_channels: 64,
            window: 8,
            heads: 4,
            mlp_ratio: 2,
        }
    }

    /// 8 channels, one head, 4×4 windows; used by gradient checks and the toy trainer.
    pub fn tiny() -> Self {
        NetworkConfig {
            in_channels: INPUT_CHANNELS,
            feat_channels: 8,
            window: 4,
            heads: 1,
            mlp_ratio: 2,
        }
    }

    pub fn decoder_channels(&self) -> usize {
        2 * self.feat_channels
    }

    pub fn head_dim(&self) -> usize {
        self.decoder_channels() / self.heads
    }

    pub fn shift(&self) -> usize {
        self.window / 2
    }

    /// Channels entering the fusion convolution: three block outputs plus the skip.
    pub fn fusion_in_channels(&self) -> usize {
        4 * self.decoder_channels()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.in_channels != INPUT_CHANNELS {
            return bad(format!("in_channels must be {INPUT_CHANNELS}, got {}", self.in_channels));
        }
        if self.feat_channels == 0 || self.window == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return bad(format!("all sizes must be positive: {self:?}"));
        }
        if !self.decoder_channels().is_multiple_of(self.heads) {
            return bad(format!(
                "{} heads do not divide {} decoder channels",
                self.heads,
                self.decoder_channels()
            ));
        }
        Ok(())
    }

    /// Checks that a spatial size tiles into whole windows.
    pub fn check_spatial(&self, height: usize, width: usize) -> Result<()> {
        if height == 0 || width == 0 || !height.is_multiple_of(self.window) || !width.is_multiple_of(self.window) {
            return Err(Error::dims(
                format!("multiples of window {}", self.window),
                format!("{height}x{width}"),
            ));
        }
        Ok(())
    }
}
