//! RGB-thermal cross-attention network for low-light image enhancement.
//!
//! The crate covers the whole pipeline: PNG input/output, synthetic exposure
//! degradation, the network itself with hand-written forward and backward
//! passes, Adam training with patch sampling and dihedral augmentation,
//! PSNR/SSIM evaluation, dataset manifests and homography alignment, and the
//! `rtxnet` command-line front end.

pub mod cli;
pub mod datasets;
pub mod degradation;
pub mod error;
pub mod imageio;
pub mod metrics;
pub mod model;
pub mod training;

pub use error::{Error, Result};
pub use imageio::{Image, ThermalImage};
pub use model::{FeatureMap, ModelConfig, Network, ParameterStore, PcaProjection, Variant};
