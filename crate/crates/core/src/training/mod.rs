//! Class-weighted training loop with validation-driven checkpoint choice.

mod adam;
mod loss;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adam::Adam;
pub use loss::{compute_class_weights, weighted_cross_entropy, ClassWeights, LossOutput, WeightMode, WEIGHT_MAX, WEIGHT_MIN};

use crate::annotations::ClassScheme;
use crate::datapipe::{check_size, make_batches, BatchOptions, DataError, SampleSource, DEFAULT_IMAGE_SIZE};
use crate::evaluation::{validate, EvalError, EvaluationReport};
use crate::network::{Checkpoint, FeatureMap, NetworkError, TrainingMeta, UNet};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("class histogram is empty (no labelled pixels)")]
    EmptyHistogram,
    #[error("non-finite loss in epoch {epoch}, batch scenes {scene_ids:?}")]
    NonFiniteLoss { epoch: usize, scene_ids: Vec<String> },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("network has {found} output classes, scheme {scheme} needs {expected}")]
    SchemeMismatch {
        scheme: ClassScheme,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Eval(EvalError),
    #[error("history io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<EvalError> for TrainError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Data(d) => TrainError::Data(d),
            EvalError::Network(n) => TrainError::Network(n),
            other => TrainError::Eval(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_mode: WeightMode,
    pub scheme: ClassScheme,
    pub image_size: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 8,
            seed: 0,
            weight_mode: WeightMode::InverseFrequency,
            scheme: ClassScheme::Bg5,
            image_size: DEFAULT_IMAGE_SIZE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        check_size(self.image_size).map_err(|e| TrainError::InvalidConfig(e.to_string()))
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the batch losses.
    pub loss: f64,
    pub pixel_accuracy: Option<f64>,
    /// Validation Dice per seen class, keyed by class name.
    pub dice: BTreeMap<String, f64>,
    pub mean_dice: Option<f64>,
    pub train_samples: usize,
    pub skipped_samples: usize,
    pub all_ignored_batches: usize,
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<(), std::io::Error> {
    let mut out = Vec::new();
    for r in history {
        serde_json::to_writer(&mut out, r).expect("history record serializes");
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>, std::io::Error> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Weights from the epoch with the highest validation mean Dice.
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub weights: ClassWeights,
    /// Validation report of the chosen epoch.
    pub best_report: EvaluationReport,
}

/// Pixel counts per class over every loadable training target, ignoring
/// the ignore label.
pub fn class_histogram<S: SampleSource + ?Sized>(source: &S, scheme: ClassScheme, batch_size: usize) -> Result<Vec<u64>, DataError> {
    let mut hist = vec![0u64; scheme.num_classes()];
    let mut batches = make_batches(source, BatchOptions::sequential(batch_size));
    let mut seen = false;
    for batch in batches.by_ref() {
        seen = true;
        for &v in &batch.targets {
            if v != scheme.ignore_label() {
                hist[usize::from(v)] += 1;
            }
        }
    }
    if !seen {
        return Err(DataError::NoValidSamples {
            skipped: batches.skipped().len(),
        });
    }
    Ok(hist)
}

/// Index of the best epoch: highest mean Dice, earliest on ties. Epochs
/// without a mean Dice rank below any that have one.
pub fn best_epoch(history: &[EpochRecord]) -> Option<usize> {
    let mut best: Option<(usize, Option<f64>)> = None;
    for (i, r) in history.iter().enumerate() {
        let better = match best {
            None => true,
            Some((_, b)) => match (r.mean_dice, b) {
                (Some(x), Some(y)) => x > y,
                (Some(_), None) => true,
                _ => false,
            },
        };
        if better {
            best = Some((i, r.mean_dice));
        }
    }
    best.map(|(i, _)| i)
}

/// Trains `model` in place. Class weights come from the training-split
/// histogram before the first epoch. After every epoch the model is scored
/// on `val`; the best-scoring weights are returned as a checkpoint.
pub fn fit<T, V>(model: &mut UNet, train: &T, val: &V, cfg: &TrainConfig) -> Result<FitOutcome, TrainError>
where
    T: SampleSource + ?Sized,
    V: SampleSource + ?Sized,
{
    cfg.validate()?;
    let classes = cfg.scheme.num_classes();
    if model.config().num_classes != classes {
        return Err(TrainError::SchemeMismatch {
            scheme: cfg.scheme,
            expected: classes,
            found: model.config().num_classes,
        });
    }
    let histogram = class_histogram(train, cfg.scheme, cfg.batch_size)?;
    let weights = compute_class_weights(&histogram, cfg.weight_mode)?;
    log::info!("class histogram {histogram:?}, weights {:?}", weights.as_slice());
    let w32: Vec<f32> = weights.as_slice().iter().map(|&w| w as f32).collect();
    let ignore = cfg.scheme.ignore_label();

    let mut opt = Adam::new(cfg.learning_rate);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(Checkpoint, EvaluationReport)> = None;
    for epoch in 1..=cfg.epochs {
        let opts = BatchOptions {
            batch_size: cfg.batch_size,
            shuffle: true,
            seed: cfg.seed,
            epoch: epoch as u64,
        };
        let mut batches = make_batches(train, opts);
        let (mut loss_sum, mut n_batches, mut all_ignored) = (0.0f64, 0usize, 0usize);
        for batch in batches.by_ref() {
            let logits = model.forward_train(&batch.inputs)?;
            let targets = batch.targets.as_slice().expect("batch targets are contiguous");
            let out = weighted_cross_entropy(logits.as_slice().expect("contiguous logits"), logits.dim(), targets, &w32, ignore);
            if !out.loss.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    scene_ids: batch.scene_ids,
                });
            }
            n_batches += 1;
            if out.all_ignored {
                log::warn!("epoch {epoch}: every pixel ignored in batch {:?}", batch.scene_ids);
                all_ignored += 1;
                continue;
            }
            loss_sum += f64::from(out.loss);
            let grad = FeatureMap::from_shape_vec(logits.dim(), out.grad).expect("gradient matches logits");
            model.zero_grad();
            model.backward(&grad);
            opt.step(model.tensors_mut());
        }
        if n_batches == 0 {
            return Err(DataError::NoValidSamples {
                skipped: batches.skipped().len(),
            }
            .into());
        }
        let report = validate(model, val, cfg.scheme, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / n_batches as f64,
            pixel_accuracy: report.pixel_accuracy,
            dice: report.classes.iter().map(|r| (r.name.clone(), r.dice)).collect(),
            mean_dice: report.mean_dice,
            train_samples: batches.emitted_samples(),
            skipped_samples: batches.skipped().len(),
            all_ignored_batches: all_ignored,
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.5} val mean dice {:?}",
            cfg.epochs,
            record.loss,
            record.mean_dice
        );
        history.push(record);
        if best_epoch(&history) == Some(epoch - 1) {
            let meta = TrainingMeta {
                epoch,
                best_mean_dice: report.mean_dice,
                seed: cfg.seed,
                image_size: cfg.image_size,
            };
            best = Some((Checkpoint::capture(model, cfg.scheme, meta), report));
        }
    }
    let (best, best_report) = best.expect("at least one epoch ran");
    Ok(FitOutcome {
        best,
        history,
        weights,
        best_report,
    })
}
