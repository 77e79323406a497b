//! Flat `key = value` run configuration and its merge with command-line
//! flags. Later layers win: defaults, then the file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use s2sd_core::annotations::ClassScheme;
use s2sd_core::network::NetworkConfig;
use s2sd_core::training::{TrainConfig, WeightMode};

use crate::error::CliError;

/// Every key a config file may set. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data: Option<PathBuf>,
    pub scheme: Option<String>,
    pub image_size: Option<u32>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
    pub weight_mode: Option<String>,
    pub train_fraction: Option<f64>,
    pub augment: Option<bool>,
    pub val_on_train: Option<bool>,
    /// Comma-separated encoder widths, e.g. `"64,128,256,512"`.
    pub features: Option<String>,
    pub use_se: Option<bool>,
    pub se_reduction: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }

    /// Overlays `other` on top of `self`.
    pub fn merge(self, other: FileConfig) -> FileConfig {
        FileConfig {
            data: other.data.or(self.data),
            scheme: other.scheme.or(self.scheme),
            image_size: other.image_size.or(self.image_size),
            epochs: other.epochs.or(self.epochs),
            batch_size: other.batch_size.or(self.batch_size),
            learning_rate: other.learning_rate.or(self.learning_rate),
            seed: other.seed.or(self.seed),
            weight_mode: other.weight_mode.or(self.weight_mode),
            train_fraction: other.train_fraction.or(self.train_fraction),
            augment: other.augment.or(self.augment),
            val_on_train: other.val_on_train.or(self.val_on_train),
            features: other.features.or(self.features),
            use_se: other.use_se.or(self.use_se),
            se_reduction: other.se_reduction.or(self.se_reduction),
        }
    }
}

/// Effective training settings, echoed as `run_config.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub data: PathBuf,
    pub train: TrainConfig,
    pub network: NetworkConfig,
    pub train_fraction: f64,
    pub augment: bool,
    pub val_on_train: bool,
}

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

pub fn parse_scheme(s: &str) -> Result<ClassScheme, CliError> {
    s.parse().map_err(|e| CliError::usage(format!("scheme: {e}")))
}

pub fn parse_features(s: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::usage(format!("features {s:?}: {e}")))
}

impl RunConfig {
    /// Resolves a merged key set; `data` must already be known.
    pub fn resolve(cfg: FileConfig) -> Result<Self, CliError> {
        let defaults = TrainConfig::default();
        let scheme = cfg.scheme.as_deref().map(parse_scheme).transpose()?.unwrap_or(defaults.scheme);
        let weight_mode = cfg
            .weight_mode
            .as_deref()
            .map(|s| s.parse::<WeightMode>().map_err(CliError::usage))
            .transpose()?
            .unwrap_or(defaults.weight_mode);
        let train = TrainConfig {
            learning_rate: cfg.learning_rate.unwrap_or(defaults.learning_rate),
            epochs: cfg.epochs.unwrap_or(defaults.epochs),
            batch_size: cfg.batch_size.unwrap_or(defaults.batch_size),
            seed: cfg.seed.unwrap_or(defaults.seed),
            weight_mode,
            scheme,
            image_size: cfg.image_size.unwrap_or(defaults.image_size),
        };
        train.validate().map_err(|e| CliError::usage(e.to_string()))?;

        let mut network = match cfg.features.as_deref() {
            Some(f) => NetworkConfig::with_features(scheme.num_classes(), parse_features(f)?),
            None => NetworkConfig {
                num_classes: scheme.num_classes(),
                ..NetworkConfig::default()
            },
        };
        network.use_se = cfg.use_se.unwrap_or(network.use_se);
        network.se_reduction = cfg.se_reduction.unwrap_or(network.se_reduction);
        network.validate().map_err(|e| CliError::usage(e.to_string()))?;
        let multiple = network.spatial_multiple() as u32;
        if !train.image_size.is_multiple_of(multiple) {
            return Err(CliError::usage(format!(
                "image_size {} is not a multiple of {multiple} required by {} encoder stages",
                train.image_size,
                network.features.len()
            )));
        }

        let train_fraction = cfg.train_fraction.unwrap_or(DEFAULT_TRAIN_FRACTION);
        if !(train_fraction > 0.0 && train_fraction <= 1.0) {
            return Err(CliError::usage(format!("train_fraction {train_fraction} must be in (0, 1]")));
        }
        let data = cfg.data.ok_or_else(|| CliError::usage("no data directory (use --data or S2SD_DATA_ROOT)"))?;
        Ok(Self {
            data,
            train,
            network,
            train_fraction,
            augment: cfg.augment.unwrap_or(true),
            val_on_train: cfg.val_on_train.unwrap_or(false),
        })
    }
}

/// Writes `value` as `dir/run_config.json`.
pub fn echo_run_config<T: Serialize>(dir: &Path, value: &T) -> Result<(), CliError> {
    let path = dir.join("run_config.json");
    let body = serde_json::to_vec_pretty(value).expect("run config serializes");
    fs::write(&path, body).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}
