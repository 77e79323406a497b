//! Frozen-checkpoint prediction and damage-map rendering.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage, Rgba, RgbaImage};
use ndarray::Axis;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{scene_id_from_name, ClassScheme};
use crate::datapipe::{load_and_resize, load_pair_input, DataError};
use crate::evaluation::argmax_mask;
use crate::network::{Checkpoint, NetworkError, UNet};
use crate::rasterizer::DamageMask;

pub const DEFAULT_ALPHA: f64 = 0.45;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("mask value {value} has no palette color")]
    UnknownClassValue { value: u8 },
    #[error("image is {image:?} but mask is {mask:?}")]
    ShapeMismatch { image: (u32, u32), mask: (u32, u32) },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("{path}: {reason}")]
    Write { path: PathBuf, reason: String },
}

const TRANSPARENT: [u8; 4] = [0, 0, 0, 0];
const NO_DAMAGE: [u8; 4] = [0, 200, 0, 255];
const MINOR: [u8; 4] = [255, 255, 0, 255];
const MAJOR: [u8; 4] = [255, 140, 0, 255];
const DESTROYED: [u8; 4] = [255, 0, 0, 255];
const IGNORED: [u8; 4] = [128, 128, 128, 255];

/// Class value to RGBA color. Background is fully transparent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    pub classes: Vec<[u8; 4]>,
    pub ignore_label: u8,
    pub ignore: [u8; 4],
}

impl Palette {
    pub fn for_scheme(scheme: ClassScheme) -> Self {
        let classes = match scheme {
            // Class 0 also holds intact buildings here; it stays transparent.
            ClassScheme::Paper4 => vec![TRANSPARENT, MINOR, MAJOR, DESTROYED],
            ClassScheme::Bg5 => vec![TRANSPARENT, NO_DAMAGE, MINOR, MAJOR, DESTROYED],
        };
        Self {
            classes,
            ignore_label: scheme.ignore_label(),
            ignore: IGNORED,
        }
    }

    pub fn color(&self, value: u8) -> Option<[u8; 4]> {
        if value == self.ignore_label {
            return Some(self.ignore);
        }
        self.classes.get(usize::from(value)).copied()
    }
}

pub fn colorize(mask: &DamageMask, palette: &Palette) -> Result<RgbaImage, InferenceError> {
    let (w, h) = (mask.width() as u32, mask.height() as u32);
    let mut out = RgbaImage::new(w, h);
    for (px, &v) in out.pixels_mut().zip(mask.data()) {
        *px = Rgba(palette.color(v).ok_or(InferenceError::UnknownClassValue { value: v })?);
    }
    Ok(out)
}

/// `out = (1 - alpha*a) * base + alpha*a * color` with mask alpha
/// `a` in {0, 1}, rounded half up.
pub fn overlay(base: &RgbImage, mask_colors: &RgbaImage, alpha: f64) -> Result<RgbImage, InferenceError> {
    if base.dimensions() != mask_colors.dimensions() {
        return Err(InferenceError::ShapeMismatch {
            image: base.dimensions(),
            mask: mask_colors.dimensions(),
        });
    }
    let mut out = base.clone();
    for (px, m) in out.pixels_mut().zip(mask_colors.pixels()) {
        if m.0[3] == 0 {
            continue;
        }
        let a = alpha * f64::from(m.0[3]) / 255.0;
        for c in 0..3 {
            let v = (1.0 - a) * f64::from(px.0[c]) + a * f64::from(m.0[c]);
            px.0[c] = (v + 0.5).floor().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// A loaded model plus the preprocessing it was trained with.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub model: UNet,
    pub scheme: ClassScheme,
    pub image_size: u32,
}

impl Predictor {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, NetworkError> {
        Ok(Self {
            model: ckpt.build_model()?,
            scheme: ckpt.class_scheme,
            image_size: ckpt.meta.image_size,
        })
    }

    pub fn load(path: &Path) -> Result<Self, NetworkError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Class mask at model resolution.
    pub fn predict_mask(&self, pre: &Path, post: &Path) -> Result<DamageMask, InferenceError> {
        let input = load_pair_input(pre, post, self.image_size)?.insert_axis(Axis(0));
        let logits = self.model.forward(&input)?;
        Ok(argmax_mask(logits.index_axis(Axis(0), 0)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassShare {
    pub class: u8,
    pub name: String,
    pub pixels: u64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionStats {
    pub scene_id: String,
    pub scheme: ClassScheme,
    pub width: usize,
    pub height: usize,
    pub classes: Vec<ClassShare>,
}

pub fn prediction_stats(scene_id: &str, mask: &DamageMask, scheme: ClassScheme) -> PredictionStats {
    let hist = mask.histogram();
    let total = (mask.width() * mask.height()).max(1) as f64;
    PredictionStats {
        scene_id: scene_id.to_string(),
        scheme,
        width: mask.width(),
        height: mask.height(),
        classes: scheme
            .class_names()
            .iter()
            .enumerate()
            .map(|(c, name)| ClassShare {
                class: c as u8,
                name: name.to_string(),
                pixels: hist[c],
                fraction: hist[c] as f64 / total,
            })
            .collect(),
    }
}

/// Paths of the four per-scene prediction artifacts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionArtifacts {
    pub mask: PathBuf,
    pub color: PathBuf,
    pub overlay: PathBuf,
    pub stats: PathBuf,
}

impl PredictionArtifacts {
    pub fn in_dir(dir: &Path, scene_id: &str) -> Self {
        Self {
            mask: dir.join(format!("{scene_id}.mask.png")),
            color: dir.join(format!("{scene_id}.color.png")),
            overlay: dir.join(format!("{scene_id}.overlay.png")),
            stats: dir.join(format!("{scene_id}.stats.json")),
        }
    }

    pub fn all(&self) -> [&Path; 4] {
        [&self.mask, &self.color, &self.overlay, &self.stats]
    }
}

/// Scene id of an image file, e.g. `a_post_disaster.png` -> `a`.
pub fn scene_id_for(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
    scene_id_from_name(&name).to_string()
}

/// The post image resized to `size` exactly as the model sees it, as 8-bit RGB.
pub fn base_image(post: &Path, size: u32) -> Result<RgbImage, DataError> {
    let arr = load_and_resize(post, size)?;
    Ok(RgbImage::from_fn(size, size, |x, y| {
        Rgb(std::array::from_fn(|c| {
            (arr[[c, y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8
        }))
    }))
}

fn write_err(path: &Path, e: impl ToString) -> InferenceError {
    InferenceError::Write {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Predicts one pair and writes mask, color, overlay and stats files.
pub fn predict_to_dir(
    predictor: &Predictor,
    pre: &Path,
    post: &Path,
    out_dir: &Path,
    alpha: f64,
) -> Result<PredictionArtifacts, InferenceError> {
    let mask = predictor.predict_mask(pre, post)?;
    let scene_id = scene_id_for(post);
    let palette = Palette::for_scheme(predictor.scheme);
    let colors = colorize(&mask, &palette)?;
    let blended = overlay(&base_image(post, predictor.image_size)?, &colors, alpha)?;
    let stats = prediction_stats(&scene_id, &mask, predictor.scheme);

    fs::create_dir_all(out_dir).map_err(|e| write_err(out_dir, e))?;
    let paths = PredictionArtifacts::in_dir(out_dir, &scene_id);
    mask.save_png(&paths.mask).map_err(|e| write_err(&paths.mask, e))?;
    colors.save(&paths.color).map_err(|e| write_err(&paths.color, e))?;
    blended.save(&paths.overlay).map_err(|e| write_err(&paths.overlay, e))?;
    let json = serde_json::to_vec_pretty(&stats).expect("stats serialize");
    fs::write(&paths.stats, json).map_err(|e| write_err(&paths.stats, e))?;
    Ok(paths)
}
