//! Dual-input U-Net with optional squeeze-and-excitation attention, plus
//! its checkpoint container.

mod checkpoint;
mod layers;
mod param;
mod se;
mod unet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{Checkpoint, TrainingMeta, CHECKPOINT_MAGIC, FORMAT_VERSION};
pub use layers::{BatchNorm2d, Conv2d, ConvTranspose2x2, DoubleConv, MaxPool2};
pub use param::Param;
pub use se::SeBlock;
pub use unet::UNet;

/// `(B, C, H, W)` activation tensor.
pub type FeatureMap = ndarray::Array4<f32>;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("spatial size {height}x{width} is not a multiple of {multiple}")]
    BadSpatialSize {
        height: usize,
        width: usize,
        multiple: usize,
    },
    #[error("expected {expected} input channels, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint does not match request: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub features: Vec<usize>,
    pub use_se: bool,
    pub se_reduction: usize,
    pub bottleneck_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 6,
            num_classes: 5,
            features: vec![64, 128, 256, 512],
            use_se: false,
            se_reduction: 16,
            bottleneck_channels: 1024,
        }
    }
}

impl NetworkConfig {
    /// Default widths with a caller-chosen encoder; the bottleneck doubles
    /// the deepest feature width.
    pub fn with_features(num_classes: usize, features: Vec<usize>) -> Self {
        let bottleneck_channels = 2 * features.last().copied().unwrap_or(0);
        Self {
            num_classes,
            features,
            bottleneck_channels,
            ..Self::default()
        }
    }

    /// Input height and width must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.features.len()
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: String| Err(NetworkError::InvalidConfig(m));
        if self.in_channels < 1 {
            return bad("in_channels must be at least 1".into());
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if self.features.is_empty() || self.features[0] == 0 {
            return bad("features must be a non-empty list of positive widths".into());
        }
        if self.features.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("features {:?} must be strictly increasing", self.features));
        }
        if self.bottleneck_channels == 0 {
            return bad("bottleneck_channels must be positive".into());
        }
        if self.use_se {
            if self.se_reduction == 0 {
                return bad("se_reduction must be positive".into());
            }
            if let Some(f) = self
                .features
                .iter()
                .find(|&&f| f % self.se_reduction != 0 || f < self.se_reduction)
            {
                return bad(format!("se_reduction {} does not divide feature width {f}", self.se_reduction));
            }
        }
        Ok(())
    }
}
