//! Scene discovery, image loading, joint augmentation and batching.

mod batch;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::{Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{parse_label_file, AnnotationError, ClassScheme};
use crate::rasterizer::{render_mask, DamageMask};
use crate::seed::rng_for;

pub use batch::{collect_batches, make_batches, Batch, BatchOptions, Batches};

pub const DEFAULT_IMAGE_SIZE: u32 = 256;
/// Spatial sizes must survive four 2x poolings.
pub const SIZE_MULTIPLE: u32 = 16;

const PRE_SUFFIX: &str = "_pre_disaster";
const POST_SUFFIX: &str = "_post_disaster";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("label {path}: {source}")]
    Label {
        path: PathBuf,
        #[source]
        source: AnnotationError,
    },
    #[error("scene {0} has no post-disaster label")]
    MissingLabel(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("split would leave one side empty ({total} scenes, ratio {ratio})")]
    EmptySplit { total: usize, ratio: f64 },
    #[error("no valid samples ({skipped} skipped)")]
    NoValidSamples { skipped: usize },
    #[error("image size {0} is not a positive multiple of {SIZE_MULTIPLE}")]
    BadSize(u32),
}

impl DataError {
    /// File the error is attributed to, used for skip lists.
    pub fn path(&self) -> Option<&Path> {
        match self {
            DataError::UnreadableImage { path, .. }
            | DataError::Label { path, .. }
            | DataError::Io { path, .. } => Some(path),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub path: String,
    pub reason: String,
}

impl SkipEntry {
    pub fn new(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn from_error(fallback: &str, err: &DataError) -> Self {
        let path = err
            .path()
            .map_or_else(|| fallback.to_string(), |p| p.display().to_string());
        Self::new(path, err.to_string())
    }
}

pub fn write_skip_list(path: &Path, entries: &[SkipEntry]) -> Result<(), DataError> {
    let body = serde_json::to_vec_pretty(entries).expect("skip entries serialize");
    fs::write(path, body).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn check_size(size: u32) -> Result<(), DataError> {
    if size == 0 || !size.is_multiple_of(SIZE_MULTIPLE) {
        Err(DataError::BadSize(size))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenePair {
    pub scene_id: String,
    pub pre_image_path: PathBuf,
    pub post_image_path: PathBuf,
    pub post_label_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct Discovery {
    pub pairs: Vec<ScenePair>,
    pub skipped: Vec<SkipEntry>,
}

pub fn images_dir(root: &Path) -> PathBuf {
    root.join("images")
}

pub fn labels_dir(root: &Path) -> PathBuf {
    root.join("labels")
}

pub fn masks_dir(root: &Path) -> PathBuf {
    root.join("masks")
}

fn list_files(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    out.sort();
    out
}

/// Pairs `<id>_pre_disaster.*` with `<id>_post_disaster.*` under
/// `root/images`, and attaches `root/labels/<id>_post_disaster.json` when
/// present. Unpaired images land in the skip list; pairs without labels
/// are kept for prediction-only use.
pub fn discover_pairs(root: &Path) -> Discovery {
    #[derive(Default)]
    struct Slots {
        pre: Option<PathBuf>,
        post: Option<PathBuf>,
    }
    let mut scenes: BTreeMap<String, Slots> = BTreeMap::new();
    let mut skipped = Vec::new();
    for path in list_files(&images_dir(root)) {
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some(id) = stem.strip_suffix(PRE_SUFFIX) {
            scenes.entry(id.to_string()).or_default().pre = Some(path.clone());
        } else if let Some(id) = stem.strip_suffix(POST_SUFFIX) {
            scenes.entry(id.to_string()).or_default().post = Some(path.clone());
        } else {
            skipped.push(SkipEntry::new(path.display().to_string(), "name lacks _pre_disaster/_post_disaster"));
        }
    }

    let labels = labels_dir(root);
    let mut pairs = Vec::new();
    for (scene_id, slots) in scenes {
        match (slots.pre, slots.post) {
            (Some(pre), Some(post)) => {
                let label = labels.join(format!("{scene_id}{POST_SUFFIX}.json"));
                pairs.push(ScenePair {
                    post_label_path: label.is_file().then_some(label),
                    scene_id,
                    pre_image_path: pre,
                    post_image_path: post,
                });
            }
            (Some(p), None) => skipped.push(SkipEntry::new(p.display().to_string(), "no post-disaster counterpart")),
            (None, Some(p)) => skipped.push(SkipEntry::new(p.display().to_string(), "no pre-disaster counterpart")),
            (None, None) => unreachable!("entry exists only after an insert"),
        }
    }
    Discovery { pairs, skipped }
}

/// Decodes an image, converts it to RGB, resizes it to `size x size` with
/// Lanczos-3 resampling and scales values into `[0, 1]`. Output is `(3, size, size)`.
pub fn load_and_resize(path: &Path, size: u32) -> Result<Array3<f32>, DataError> {
    let img = image::open(path).map_err(|e| DataError::UnreadableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = img.to_rgb32f();
    let resized = if rgb.dimensions() == (size, size) {
        rgb
    } else {
        image::imageops::resize(&rgb, size, size, FilterType::Lanczos3)
    };
    let n = size as usize;
    let mut out = Array3::<f32>::zeros((3, n, n));
    for (x, y, px) in resized.enumerate_pixels() {
        for c in 0..3 {
            // Lanczos lobes can overshoot the source range.
            out[[c, y as usize, x as usize]] = px.0[c].clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// `(6, H, W)`: channels 0-2 pre RGB, 3-5 post RGB.
    pub input: Array3<f32>,
    pub target: DamageMask,
    pub scene_id: String,
}

/// Random choices for one augmentation draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub brightness: f32,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        flip: false,
        brightness: 1.0,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let flip = rng.random_bool(0.5);
        let brightness = rng.random_range(0.8f32..=1.2);
        Self { flip, brightness }
    }
}

/// Applies a draw: joint left-right flip of both images and the mask, and
/// one shared brightness factor for pre and post (mask untouched).
pub fn apply_augment(mut sample: SampleRecord, draw: AugmentDraw) -> SampleRecord {
    if draw.flip {
        sample.input.invert_axis(Axis(2));
        sample.input = sample.input.as_standard_layout().into_owned();
        sample.target.flip_horizontal();
    }
    if draw.brightness != 1.0 {
        let u = draw.brightness;
        sample.input.mapv_inplace(|v| (v * u).clamp(0.0, 1.0));
    }
    sample
}

pub fn augment<R: Rng + ?Sized>(sample: SampleRecord, rng: &mut R) -> SampleRecord {
    let draw = AugmentDraw::sample(rng);
    apply_augment(sample, draw)
}

/// Seeded shuffle, then the first `ceil(ratio * N)` scenes go to training.
pub fn split_train_val(
    pairs: &[ScenePair],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<ScenePair>, Vec<ScenePair>), DataError> {
    let total = pairs.len();
    let n_train = (ratio * total as f64).ceil() as usize;
    if !(ratio > 0.0 && ratio < 1.0) || n_train == 0 || n_train >= total {
        return Err(DataError::EmptySplit { total, ratio });
    }
    let mut order: Vec<&ScenePair> = pairs.iter().collect();
    order.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
    order.shuffle(&mut rng_for(seed, "split"));
    let val = order.split_off(n_train);
    Ok((
        order.into_iter().cloned().collect(),
        val.into_iter().cloned().collect(),
    ))
}

/// Anything that can produce samples by index. Loading may fail per sample;
/// failures are skipped by the batcher.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn scene_id(&self, index: usize) -> &str;

    /// Loads sample `index`; `epoch` keys any augmentation randomness.
    fn load(&self, index: usize, epoch: u64) -> Result<SampleRecord, DataError>;
}

/// Disk-backed scenes. Targets come from a cached mask under `masks/`
/// when one matching `scheme`/`size` exists, otherwise from rendering the
/// label file at the target size.
#[derive(Debug, Clone)]
pub struct SceneDataset {
    pairs: Vec<ScenePair>,
    size: u32,
    scheme: ClassScheme,
    augment_seed: Option<u64>,
    mask_cache: Option<PathBuf>,
}

impl SceneDataset {
    pub fn new(pairs: Vec<ScenePair>, size: u32, scheme: ClassScheme) -> Self {
        Self {
            pairs,
            size,
            scheme,
            augment_seed: None,
            mask_cache: None,
        }
    }

    /// Enables random flip/brightness, keyed by `(seed, epoch, scene_id)`.
    pub fn with_augmentation(mut self, seed: u64) -> Self {
        self.augment_seed = Some(seed);
        self
    }

    /// Uses masks written by [`cache_masks`] when their manifest matches.
    pub fn with_mask_cache(mut self, dir: PathBuf) -> Self {
        if MaskManifest::read(&dir).is_some_and(|m| m.scheme == self.scheme && m.size == self.size) {
            self.mask_cache = Some(dir);
        }
        self
    }

    pub fn pairs(&self) -> &[ScenePair] {
        &self.pairs
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn scheme(&self) -> ClassScheme {
        self.scheme
    }

    pub fn load_target(&self, pair: &ScenePair) -> Result<DamageMask, DataError> {
        if let Some(dir) = &self.mask_cache {
            let cached = dir.join(mask_file_name(&pair.scene_id));
            if let Ok(mask) = DamageMask::load_png(&cached) {
                let n = self.size as usize;
                if (mask.width(), mask.height()) == (n, n) {
                    return Ok(mask);
                }
                return Ok(mask.resize_nearest(n, n));
            }
        }
        let label = pair
            .post_label_path
            .as_ref()
            .ok_or_else(|| DataError::MissingLabel(pair.scene_id.clone()))?;
        let bytes = fs::read(label).map_err(|source| DataError::Io {
            path: label.clone(),
            source,
        })?;
        let set = parse_label_file(&bytes).map_err(|source| DataError::Label {
            path: label.clone(),
            source,
        })?;
        Ok(render_mask(&set, self.size, self.size, self.scheme))
    }
}

/// Stacks pre and post rasters into one `(6, H, W)` input.
pub fn stack_pair(pre: &Array3<f32>, post: &Array3<f32>) -> Array3<f32> {
    ndarray::concatenate(Axis(0), &[pre.view(), post.view()]).expect("matching raster shapes")
}

pub fn load_pair_input(pre: &Path, post: &Path, size: u32) -> Result<Array3<f32>, DataError> {
    let pre = load_and_resize(pre, size)?;
    let post = load_and_resize(post, size)?;
    Ok(stack_pair(&pre, &post))
}

impl SampleSource for SceneDataset {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn scene_id(&self, index: usize) -> &str {
        &self.pairs[index].scene_id
    }

    fn load(&self, index: usize, epoch: u64) -> Result<SampleRecord, DataError> {
        let pair = &self.pairs[index];
        let target = self.load_target(pair)?;
        let input = load_pair_input(&pair.pre_image_path, &pair.post_image_path, self.size)?;
        let sample = SampleRecord {
            input,
            target,
            scene_id: pair.scene_id.clone(),
        };
        Ok(match self.augment_seed {
            Some(seed) => {
                let mut rng = rng_for(seed, &format!("augment/{epoch}/{}", pair.scene_id));
                augment(sample, &mut rng)
            }
            None => sample,
        })
    }
}

/// Samples already in memory; never augmented.
impl SampleSource for Vec<SampleRecord> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn scene_id(&self, index: usize) -> &str {
        &self[index].scene_id
    }

    fn load(&self, index: usize, _epoch: u64) -> Result<SampleRecord, DataError> {
        Ok(self[index].clone())
    }
}

pub fn mask_file_name(scene_id: &str) -> String {
    format!("{scene_id}{POST_SUFFIX}.png")
}

/// Records which scheme and size the cached masks were rendered with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskManifest {
    pub scheme: ClassScheme,
    pub size: u32,
    pub masks: Vec<String>,
}

impl MaskManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn read(dir: &Path) -> Option<Self> {
        let bytes = fs::read(dir.join(Self::FILE)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    pub fn write(&self, dir: &Path) -> Result<(), DataError> {
        let path = dir.join(Self::FILE);
        fs::write(&path, serde_json::to_vec_pretty(self).expect("manifest serializes"))
            .map_err(|source| DataError::Io { path, source })
    }
}

/// Outcome of [`cache_masks`].
#[derive(Debug, Clone, Default, Serialize)]
pub struct PreprocessReport {
    pub labels_found: usize,
    pub rendered: Vec<String>,
    pub skipped: Vec<SkipEntry>,
}

/// Renders every labelled scene's mask at `size x size` into `root/masks`,
/// writing a manifest and `skip_list.json` next to them.
pub fn cache_masks(root: &Path, scheme: ClassScheme, size: u32) -> Result<PreprocessReport, DataError> {
    check_size(size)?;
    let discovery = discover_pairs(root);
    let labels_found = list_files(&labels_dir(root))
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .count();
    let out_dir = masks_dir(root);
    fs::create_dir_all(&out_dir).map_err(|source| DataError::Io {
        path: out_dir.clone(),
        source,
    })?;

    let dataset = SceneDataset::new(discovery.pairs, size, scheme);
    let mut report = PreprocessReport {
        labels_found,
        skipped: discovery.skipped,
        ..Default::default()
    };
    for pair in dataset.pairs() {
        match dataset.load_target(pair) {
            Ok(mask) => {
                let name = mask_file_name(&pair.scene_id);
                let path = out_dir.join(&name);
                mask.save_png(&path).map_err(|e| DataError::Io {
                    path: path.clone(),
                    source: std::io::Error::other(e),
                })?;
                report.rendered.push(name);
            }
            Err(e) => report.skipped.push(SkipEntry::from_error(&pair.scene_id, &e)),
        }
    }
    MaskManifest {
        scheme,
        size,
        masks: report.rendered.clone(),
    }
    .write(&out_dir)?;
    write_skip_list(&out_dir.join("skip_list.json"), &report.skipped)?;
    Ok(report)
}
