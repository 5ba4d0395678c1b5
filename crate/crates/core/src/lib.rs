//! Ghost-free HDR fusion from bracketed exposures.
//!
//! The crate covers the whole path from LDR files to a fused HDR image:
//!
//! - [`image_io`]: PNG/PPM exposures in, PFM radiance out.
//! - [`radiometry`]: `H = I^γ / t` lifting, μ-law compression and the
//!   7-channel network input.
//! - [`structure_tensor`]: Sobel gradients, smoothed structure tensors and
//!   the normalized structure map used as an input channel and in the loss.
//! - [`network`]: the two-input fusion network and its backward pass.
//! - [`loss`]: the tonemapped training loss and PSNR metrics.
//! - [`pipeline`]: reference selection and sequential fusion of any number
//!   of exposures.
//! - [`verification`]: synthetic scenes, finite-difference gradient checks
//!   and a small overfitting trainer.
//!
//! ```
//! use hdrfuse::radiometry::TonemapConfig;
//!
//! let tm = TonemapConfig::default();
//! assert_eq!(tm.compress(0.0), 0.0);
//! assert_eq!(tm.compress(1.0), 1.0);
//! ```

pub mod error;
pub mod image_io;
pub mod loss;
pub mod network;
pub mod pipeline;
pub mod radiometry;
pub mod structure_tensor;
pub mod verification;

pub use error::{Error, Result};
pub use image_io::{HdrImage, LdrImage, Plane};
pub use network::{FeatureMap, NetworkConfig, NetworkParams};
pub use radiometry::{InputStack, TonemapConfig};
pub use structure_tensor::StMap;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/radiometry.md")]
    mod radiometry {}
    #[doc = include_str!("../../../book/src/structure-maps.md")]
    mod structure_maps {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/loss.md")]
    mod loss {}
    #[doc = include_str!("../../../book/src/sequential-fusion.md")]
    mod sequential_fusion {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
