//! Synthetic pre/post scenes with analytically known masks.
//!
//! A scene is a dark textured background with bright axis-aligned
//! rectangular buildings. The post image perturbs each building according
//! to its damage subtype, so the pre/post difference grows with severity.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotations::{
    map_damage_class, write_label_file, AnnotationSet, BuildingAnnotation, ClassScheme, DamageSubtype, Point2D,
    PolygonGeom,
};
use crate::datapipe::{images_dir, labels_dir, SampleRecord, SIZE_MULTIPLE};
use crate::rasterizer::DamageMask;
use crate::seed::rng_for;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("invalid fixture spec: {0}")]
    InvalidSpec(String),
    #[error("scene index {index} out of range (scene_count {count})")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("{path}: {reason}")]
    Write { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureSpec {
    pub seed: u64,
    pub scene_count: usize,
    pub image_size: u32,
    /// Inclusive range of buildings per scene.
    pub min_buildings: usize,
    pub max_buildings: usize,
    /// Probabilities in [`DamageSubtype::ALL`] order.
    pub damage_probs: [f64; 5],
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            scene_count: 4,
            image_size: 256,
            min_buildings: 6,
            max_buildings: 10,
            damage_probs: [0.25, 0.25, 0.25, 0.25, 0.0],
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<(), FixtureError> {
        let bad = |m: String| Err(FixtureError::InvalidSpec(m));
        if self.image_size == 0 || !self.image_size.is_multiple_of(SIZE_MULTIPLE) {
            return bad(format!("image_size {} is not a positive multiple of {SIZE_MULTIPLE}", self.image_size));
        }
        if self.min_buildings > self.max_buildings {
            return bad(format!("building range {}..={} is empty", self.min_buildings, self.max_buildings));
        }
        if self.damage_probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return bad("damage probabilities must be non-negative".into());
        }
        let total: f64 = self.damage_probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("damage probabilities sum to {total}, not 1"));
        }
        Ok(())
    }

    pub fn scene_id(&self, index: usize) -> String {
        format!("synthetic-{}_{index:08}", self.seed)
    }
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub row0: u32,
    pub col0: u32,
    pub row1: u32,
    pub col1: u32,
}

impl PixelRect {
    pub fn contains(&self, row: u32, col: u32) -> bool {
        (self.row0..=self.row1).contains(&row) && (self.col0..=self.col1).contains(&col)
    }

    pub fn area(&self) -> u64 {
        u64::from(self.row1 - self.row0 + 1) * u64::from(self.col1 - self.col0 + 1)
    }

    /// Outline whose interior holds exactly the covered pixel centers.
    pub fn polygon(&self) -> PolygonGeom {
        let (x0, y0) = (f64::from(self.col0), f64::from(self.row0));
        let (x1, y1) = (f64::from(self.col1 + 1), f64::from(self.row1 + 1));
        PolygonGeom {
            exterior: vec![
                Point2D { x: x0, y: y0 },
                Point2D { x: x1, y: y0 },
                Point2D { x: x1, y: y1 },
                Point2D { x: x0, y: y1 },
            ],
            interiors: Vec::new(),
        }
    }

    fn overlaps_padded(&self, other: &PixelRect, pad: u32) -> bool {
        self.row0 <= other.row1 + pad
            && other.row0 <= self.row1 + pad
            && self.col0 <= other.col1 + pad
            && other.col0 <= self.col1 + pad
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureBuilding {
    pub uid: String,
    pub rect: PixelRect,
    pub subtype: DamageSubtype,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScene {
    pub scene_id: String,
    pub pre: RgbImage,
    pub post: RgbImage,
    pub label_json: Vec<u8>,
    pub buildings: Vec<FixtureBuilding>,
}

/// Overlap order: ignored > destroyed > major > minor > no-damage > background.
fn severity(subtype: Option<DamageSubtype>) -> u8 {
    match subtype {
        None => 0,
        Some(DamageSubtype::NoDamage) => 1,
        Some(DamageSubtype::MinorDamage) => 2,
        Some(DamageSubtype::MajorDamage) => 3,
        Some(DamageSubtype::Destroyed) => 4,
        Some(DamageSubtype::Unclassified) => 5,
    }
}

impl GeneratedScene {
    pub fn size(&self) -> u32 {
        self.pre.width()
    }

    /// Most severe subtype covering each pixel, row-major.
    fn subtype_grid(&self) -> Vec<Option<DamageSubtype>> {
        subtype_grid(self.size(), &self.buildings)
    }

    /// Ground truth built straight from the rectangles.
    pub fn oracle_mask(&self, scheme: ClassScheme) -> DamageMask {
        let n = self.size() as usize;
        let data = self
            .subtype_grid()
            .into_iter()
            .map(|s| s.map_or(scheme.background(), |s| map_damage_class(s, scheme)))
            .collect();
        DamageMask::from_vec(n, n, data).expect("square grid")
    }

    /// In-memory training sample, identical to loading the written files
    /// at native size.
    pub fn to_sample(&self, scheme: ClassScheme) -> SampleRecord {
        let n = self.size() as usize;
        let mut input = Array3::<f32>::zeros((6, n, n));
        for (offset, img) in [(0, &self.pre), (3, &self.post)] {
            for (x, y, px) in img.enumerate_pixels() {
                for c in 0..3 {
                    input[[offset + c, y as usize, x as usize]] = f32::from(px.0[c]) / 255.0;
                }
            }
        }
        SampleRecord {
            input,
            target: self.oracle_mask(scheme),
            scene_id: self.scene_id.clone(),
        }
    }

    pub fn annotations(&self) -> AnnotationSet {
        annotation_set(&self.scene_id, self.size(), &self.buildings)
    }

    pub fn pre_path(&self, root: &Path) -> PathBuf {
        images_dir(root).join(format!("{}_pre_disaster.png", self.scene_id))
    }

    pub fn post_path(&self, root: &Path) -> PathBuf {
        images_dir(root).join(format!("{}_post_disaster.png", self.scene_id))
    }

    pub fn label_path(&self, root: &Path) -> PathBuf {
        labels_dir(root).join(format!("{}_post_disaster.json", self.scene_id))
    }

    /// Writes the scene in the `images/` + `labels/` layout.
    pub fn write(&self, root: &Path) -> Result<(), FixtureError> {
        for dir in [images_dir(root), labels_dir(root)] {
            fs::create_dir_all(&dir).map_err(|e| FixtureError::Write {
                path: dir.clone(),
                reason: e.to_string(),
            })?;
        }
        for (img, path) in [(&self.pre, self.pre_path(root)), (&self.post, self.post_path(root))] {
            img.save(&path).map_err(|e| FixtureError::Write {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        }
        let path = self.label_path(root);
        fs::write(&path, &self.label_json).map_err(|e| FixtureError::Write {
            path: path.clone(),
            reason: e.to_string(),
        })
    }
}

fn subtype_grid(size: u32, buildings: &[FixtureBuilding]) -> Vec<Option<DamageSubtype>> {
    let n = size as usize;
    let mut grid = vec![None; n * n];
    for b in buildings {
        for r in b.rect.row0..=b.rect.row1.min(size - 1) {
            for c in b.rect.col0..=b.rect.col1.min(size - 1) {
                let cell = &mut grid[r as usize * n + c as usize];
                if severity(Some(b.subtype)) > severity(*cell) {
                    *cell = Some(b.subtype);
                }
            }
        }
    }
    grid
}

fn annotation_set(scene_id: &str, size: u32, buildings: &[FixtureBuilding]) -> AnnotationSet {
    AnnotationSet {
        scene_id: scene_id.to_string(),
        image_width: size,
        image_height: size,
        buildings: buildings
            .iter()
            .map(|b| BuildingAnnotation {
                uid: b.uid.clone(),
                geometry: b.rect.polygon(),
                subtype: b.subtype,
            })
            .collect(),
    }
}

fn pick_subtype<R: Rng + ?Sized>(probs: &[f64; 5], rng: &mut R) -> DamageSubtype {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (p, s) in probs.iter().zip(DamageSubtype::ALL) {
        acc += p;
        if u < acc {
            return s;
        }
    }
    // Rounding slack: fall back to the last subtype with mass.
    DamageSubtype::ALL
        .into_iter()
        .zip(probs)
        .rev()
        .find(|(_, &p)| p > 0.0)
        .map_or(DamageSubtype::NoDamage, |(s, _)| s)
}

/// Random non-overlapping layout; after repeated collisions a building is
/// accepted where it landed, so rare overlaps do occur.
pub fn sample_layout(spec: &FixtureSpec, index: usize) -> Vec<FixtureBuilding> {
    let mut rng = rng_for(spec.seed, &format!("fixture/{index}/layout"));
    let size = spec.image_size;
    let count = rng.random_range(spec.min_buildings..=spec.max_buildings);
    let min_side = (size / 16).max(4).min(size);
    let max_side = (size / 4).max(min_side);
    let scene_id = spec.scene_id(index);
    let mut buildings: Vec<FixtureBuilding> = Vec::with_capacity(count);
    for k in 0..count {
        let mut rect = PixelRect { row0: 0, col0: 0, row1: 0, col1: 0 };
        for _attempt in 0..20 {
            let h = rng.random_range(min_side..=max_side);
            let w = rng.random_range(min_side..=max_side);
            let row0 = rng.random_range(0..=size - h);
            let col0 = rng.random_range(0..=size - w);
            rect = PixelRect {
                row0,
                col0,
                row1: row0 + h - 1,
                col1: col0 + w - 1,
            };
            if buildings.iter().all(|b| !b.rect.overlaps_padded(&rect, 2)) {
                break;
            }
        }
        buildings.push(FixtureBuilding {
            uid: format!("{scene_id}-b{k:03}"),
            rect,
            subtype: pick_subtype(&spec.damage_probs, &mut rng),
        });
    }
    buildings
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Renders images and label for a given building layout.
pub fn render_scene(spec: &FixtureSpec, index: usize, buildings: Vec<FixtureBuilding>) -> GeneratedScene {
    let size = spec.image_size;
    let scene_id = spec.scene_id(index);
    let mut rng = rng_for(spec.seed, &format!("fixture/{index}/background"));
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(55.0..75.0));
    let (fx, fy, phase) = (
        rng.random_range(0.02..0.08),
        rng.random_range(0.02..0.08),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let mut pre = RgbImage::from_fn(size, size, |x, y| {
        let wave = 12.0 * (f64::from(x) * fx + f64::from(y) * fy + phase).sin();
        let noise = rng.random_range(-12.0..12.0);
        Rgb(std::array::from_fn(|c| clamp_u8(base[c] + wave + noise)))
    });
    for b in &buildings {
        let mut crng = rng_for(spec.seed, &format!("fixture/color/{}", b.uid));
        let color = Rgb(std::array::from_fn(|_| crng.random_range(170..=250u8)));
        for r in b.rect.row0..=b.rect.row1 {
            for c in b.rect.col0..=b.rect.col1 {
                pre.put_pixel(c, r, color);
            }
        }
    }

    // Each pixel takes the perturbation of the most severe building over it;
    // the noise stream is keyed by that building's uid.
    let mut post = pre.clone();
    let mut owners: Vec<&FixtureBuilding> = buildings.iter().collect();
    owners.sort_by_key(|b| severity(Some(b.subtype)));
    for b in owners {
        let mut prng = rng_for(spec.seed, &format!("fixture/perturb/{}", b.uid));
        for r in b.rect.row0..=b.rect.row1 {
            for c in b.rect.col0..=b.rect.col1 {
                let p = pre.get_pixel(c, r).0;
                let out = match b.subtype {
                    DamageSubtype::NoDamage | DamageSubtype::Unclassified => p,
                    DamageSubtype::MinorDamage => p.map(|v| clamp_u8(f64::from(v) * 0.85)),
                    DamageSubtype::MajorDamage => {
                        let n: f64 = prng.random_range(-15.0..15.0);
                        p.map(|v| clamp_u8(f64::from(v) * 0.55 + n))
                    }
                    DamageSubtype::Destroyed => {
                        let n: f64 = prng.random_range(-25.0..25.0);
                        [clamp_u8(55.0 + n), clamp_u8(48.0 + n), clamp_u8(42.0 + n)]
                    }
                };
                post.put_pixel(c, r, Rgb(out));
            }
        }
    }
    let label_json = write_label_file(&annotation_set(&scene_id, size, &buildings));
    GeneratedScene {
        scene_id,
        pre,
        post,
        label_json,
        buildings,
    }
}

pub fn generate_scene(spec: &FixtureSpec, index: usize) -> Result<GeneratedScene, FixtureError> {
    spec.validate()?;
    if index >= spec.scene_count {
        return Err(FixtureError::IndexOutOfRange {
            index,
            count: spec.scene_count,
        });
    }
    Ok(render_scene(spec, index, sample_layout(spec, index)))
}

/// Generates every scene (in parallel) and writes them under `root`.
pub fn write_dataset(spec: &FixtureSpec, root: &Path) -> Result<Vec<GeneratedScene>, FixtureError> {
    spec.validate()?;
    let scenes: Vec<GeneratedScene> = (0..spec.scene_count)
        .into_par_iter()
        .map(|i| render_scene(spec, i, sample_layout(spec, i)))
        .collect();
    for s in &scenes {
        s.write(root)?;
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::parse_label_file;
    use crate::rasterizer::render_mask;

    fn spec(count: usize, size: u32) -> FixtureSpec {
        FixtureSpec {
            seed: 7,
            scene_count: count,
            image_size: size,
            ..FixtureSpec::default()
        }
    }

    #[test]
    fn spec_validation() {
        assert!(FixtureSpec::default().validate().is_ok());
        for bad in [
            FixtureSpec { image_size: 100, ..Default::default() },
            FixtureSpec { min_buildings: 5, max_buildings: 2, ..Default::default() },
            FixtureSpec { damage_probs: [0.5, 0.5, 0.5, 0.0, 0.0], ..Default::default() },
            FixtureSpec { damage_probs: [1.5, -0.5, 0.0, 0.0, 0.0], ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(FixtureError::InvalidSpec(_))));
        }
        assert!(matches!(generate_scene(&spec(2, 64), 2), Err(FixtureError::IndexOutOfRange { .. })));
    }

    #[test]
    fn empty_scene() {
        let s = FixtureSpec { min_buildings: 0, max_buildings: 0, ..spec(1, 64) };
        let scene = generate_scene(&s, 0).unwrap();
        assert_eq!(scene.pre, scene.post);
        assert!(parse_label_file(&scene.label_json).unwrap().buildings.is_empty());
        assert!(scene.oracle_mask(ClassScheme::Bg5).data().iter().all(|&v| v == 0));
    }

    #[test]
    fn same_index_is_byte_identical() {
        let s = spec(3, 64);
        assert_eq!(generate_scene(&s, 1).unwrap(), generate_scene(&s, 1).unwrap());
        assert_ne!(generate_scene(&s, 1).unwrap().pre, generate_scene(&s, 2).unwrap().pre);
    }

    #[test]
    fn destroyed_rectangle_area() {
        let b = FixtureBuilding {
            uid: "x".into(),
            rect: PixelRect { row0: 10, col0: 30, row1: 20, col1: 50 },
            subtype: DamageSubtype::Destroyed,
        };
        let scene = render_scene(&spec(1, 64), 0, vec![b]);
        let mask = scene.oracle_mask(ClassScheme::Bg5);
        assert_eq!(mask.histogram()[4], 11 * 21);
        assert_eq!(mask.get(10, 30), 4);
        assert_eq!(mask.get(20, 50), 4);
        assert_eq!(mask.get(21, 50), 0);
        assert_eq!(mask.get(20, 51), 0);
        let parsed = parse_label_file(&scene.label_json).unwrap();
        assert_eq!(render_mask(&parsed, 64, 64, ClassScheme::Bg5), mask);
    }

    #[test]
    fn overlap_takes_the_more_severe_class() {
        let mk = |uid: &str, rect, subtype| FixtureBuilding { uid: uid.into(), rect, subtype };
        let scene = render_scene(
            &spec(1, 32),
            0,
            vec![
                mk("a", PixelRect { row0: 0, col0: 0, row1: 9, col1: 9 }, DamageSubtype::MajorDamage),
                mk("b", PixelRect { row0: 5, col0: 5, row1: 14, col1: 14 }, DamageSubtype::MinorDamage),
            ],
        );
        let mask = scene.oracle_mask(ClassScheme::Bg5);
        assert_eq!(mask.get(7, 7), 3);
        assert_eq!(mask.get(12, 12), 2);
        let parsed = parse_label_file(&scene.label_json).unwrap();
        assert_eq!(render_mask(&parsed, 32, 32, ClassScheme::Bg5), mask);
    }

    #[test]
    fn label_closure_for_generated_scenes() {
        let s = spec(6, 128);
        for i in 0..6 {
            let scene = generate_scene(&s, i).unwrap();
            let parsed = parse_label_file(&scene.label_json).unwrap();
            assert_eq!(parsed.scene_id, scene.scene_id);
            for scheme in [ClassScheme::Bg5, ClassScheme::Paper4] {
                assert_eq!(render_mask(&parsed, 128, 128, scheme), scene.oracle_mask(scheme));
            }
        }
    }

    #[test]
    fn pre_post_delta_grows_with_severity() {
        let s = FixtureSpec { scene_count: 12, ..spec(12, 128) };
        let mut deltas: Vec<(u8, f64)> = Vec::new();
        for i in 0..12 {
            let scene = generate_scene(&s, i).unwrap();
            let grid = scene.subtype_grid();
            for b in &scene.buildings {
                let (mut sum, mut n) = (0.0, 0u32);
                for r in b.rect.row0..=b.rect.row1 {
                    for c in b.rect.col0..=b.rect.col1 {
                        if grid[(r * 128 + c) as usize] != Some(b.subtype) {
                            continue;
                        }
                        let (p, q) = (scene.pre.get_pixel(c, r).0, scene.post.get_pixel(c, r).0);
                        sum += p.iter().zip(q).map(|(&a, b)| (f64::from(a) - f64::from(b)).abs()).sum::<f64>() / 3.0;
                        n += 1;
                    }
                }
                if n > 0 {
                    deltas.push((severity(Some(b.subtype)), sum / f64::from(n)));
                }
            }
        }
        for level in 1..=3u8 {
            let lo = deltas.iter().filter(|d| d.0 == level).map(|d| d.1).fold(f64::MIN, f64::max);
            let hi = deltas.iter().filter(|d| d.0 == level + 1).map(|d| d.1).fold(f64::MAX, f64::min);
            assert!(lo < hi, "severity {level}: max delta {lo} vs next level min {hi}");
        }
        assert!(deltas.iter().filter(|d| d.0 == 1).all(|d| d.1 == 0.0));
    }

    #[test]
    fn dataset_is_written_in_discoverable_layout() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = write_dataset(&spec(3, 64), dir.path()).unwrap();
        let found = crate::datapipe::discover_pairs(dir.path());
        assert_eq!(found.pairs.len(), 3);
        assert!(found.skipped.is_empty());
        for (pair, scene) in found.pairs.iter().zip(&scenes) {
            assert_eq!(pair.scene_id, scene.scene_id);
            assert_eq!(image::open(&pair.pre_image_path).unwrap().to_rgb8(), scene.pre);
            let pre = crate::datapipe::load_and_resize(&pair.pre_image_path, 64).unwrap();
            let post = crate::datapipe::load_and_resize(&pair.post_image_path, 64).unwrap();
            let sample = scene.to_sample(ClassScheme::Bg5);
            assert_eq!(crate::datapipe::stack_pair(&pre, &post), sample.input);
        }
    }
}
