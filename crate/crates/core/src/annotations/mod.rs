//! Building annotations: label-file parsing and damage class schemes.
//!
//! Label files follow the xBD layout: a JSON object whose `metadata`
//! holds the image extent and name, and whose `features.xy` list holds one
//! WKT polygon (pixel coordinates) per building with an optional damage
//! `subtype` and `uid`.

mod wkt;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use wkt::{parse_wkt_polygon, to_wkt, WktError};

/// Mask value excluded from loss and metrics.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

/// Polygon with rings stored unclosed (no repeated closing vertex).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolygonGeom {
    pub exterior: Vec<Point2D>,
    pub interiors: Vec<Vec<Point2D>>,
}

impl PolygonGeom {
    pub fn rings(&self) -> impl Iterator<Item = &[Point2D]> {
        std::iter::once(self.exterior.as_slice()).chain(self.interiors.iter().map(Vec::as_slice))
    }

    pub fn points(&self) -> impl Iterator<Item = &Point2D> {
        self.rings().flatten()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DamageSubtype {
    #[serde(rename = "no-damage")]
    NoDamage,
    #[serde(rename = "minor-damage")]
    MinorDamage,
    #[serde(rename = "major-damage")]
    MajorDamage,
    #[serde(rename = "destroyed")]
    Destroyed,
    #[serde(rename = "un-classified")]
    Unclassified,
}

impl DamageSubtype {
    pub const ALL: [DamageSubtype; 5] = [
        DamageSubtype::NoDamage,
        DamageSubtype::MinorDamage,
        DamageSubtype::MajorDamage,
        DamageSubtype::Destroyed,
        DamageSubtype::Unclassified,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DamageSubtype::NoDamage => "no-damage",
            DamageSubtype::MinorDamage => "minor-damage",
            DamageSubtype::MajorDamage => "major-damage",
            DamageSubtype::Destroyed => "destroyed",
            DamageSubtype::Unclassified => "un-classified",
        }
    }
}

impl fmt::Display for DamageSubtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DamageSubtype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DamageSubtype::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildingAnnotation {
    pub uid: String,
    pub geometry: PolygonGeom,
    pub subtype: DamageSubtype,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub scene_id: String,
    pub image_width: u32,
    pub image_height: u32,
    pub buildings: Vec<BuildingAnnotation>,
}

/// Subtype to class-integer mapping.
///
/// `Paper4` shares class 0 between background and intact buildings;
/// `Bg5` reserves class 0 for background and shifts damage classes by one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassScheme {
    Paper4,
    #[default]
    Bg5,
}

impl ClassScheme {
    pub fn name(self) -> &'static str {
        match self {
            ClassScheme::Paper4 => "paper4",
            ClassScheme::Bg5 => "bg5",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            ClassScheme::Paper4 => 4,
            ClassScheme::Bg5 => 5,
        }
    }

    pub fn ignore_label(self) -> u8 {
        IGNORE_LABEL
    }

    /// Value every pixel starts with before buildings are drawn.
    pub fn background(self) -> u8 {
        0
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            ClassScheme::Paper4 => &["no-damage", "minor-damage", "major-damage", "destroyed"],
            ClassScheme::Bg5 => &[
                "background",
                "no-damage",
                "minor-damage",
                "major-damage",
                "destroyed",
            ],
        }
    }

    pub fn is_legal(self, value: u8) -> bool {
        value == IGNORE_LABEL || usize::from(value) < self.num_classes()
    }
}

impl fmt::Display for ClassScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper4" => Ok(ClassScheme::Paper4),
            "bg5" => Ok(ClassScheme::Bg5),
            other => Err(format!("unknown class scheme '{other}' (expected bg5 or paper4)")),
        }
    }
}

pub fn map_damage_class(subtype: DamageSubtype, scheme: ClassScheme) -> u8 {
    let offset = match scheme {
        ClassScheme::Paper4 => 0,
        ClassScheme::Bg5 => 1,
    };
    match subtype {
        DamageSubtype::NoDamage => offset,
        DamageSubtype::MinorDamage => offset + 1,
        DamageSubtype::MajorDamage => offset + 2,
        DamageSubtype::Destroyed => offset + 3,
        DamageSubtype::Unclassified => IGNORE_LABEL,
    }
}

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("malformed label JSON: {0}")]
    MalformedJson(String),
    #[error("label metadata is missing `{0}`")]
    MissingMetadata(&'static str),
    #[error("feature {index}: unknown damage subtype '{subtype}'")]
    UnknownSubtype { index: usize, subtype: String },
    #[error("feature {index}: {source}")]
    Geometry {
        index: usize,
        #[source]
        source: WktError,
    },
    #[error("feature {index}: vertex ({x}, {y}) lies far outside the {width}x{height} image")]
    OutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        width: u32,
        height: u32,
    },
    #[error("duplicate building uid '{0}'")]
    DuplicateUid(String),
}

/// Strips the `_pre_disaster` / `_post_disaster` suffix and extension
/// from an xBD image name.
pub fn scene_id_from_name(name: &str) -> &str {
    let stem = name.rsplit_once('.').map_or(name, |(s, _)| s);
    stem.strip_suffix("_post_disaster")
        .or_else(|| stem.strip_suffix("_pre_disaster"))
        .unwrap_or(stem)
}

fn metadata_dim(meta: &Value, key: &'static str) -> Result<u32, AnnotationError> {
    let v = meta
        .get(key)
        .and_then(Value::as_u64)
        .ok_or(AnnotationError::MissingMetadata(key))?;
    match u32::try_from(v) {
        Ok(d) if d > 0 => Ok(d),
        _ => Err(AnnotationError::MalformedJson(format!(
            "metadata.{key} must be a positive integer, got {v}"
        ))),
    }
}

/// Parses one label file. Any feature error aborts the whole file.
pub fn parse_label_file(bytes: &[u8]) -> Result<AnnotationSet, AnnotationError> {
    let root: Value =
        serde_json::from_slice(bytes).map_err(|e| AnnotationError::MalformedJson(e.to_string()))?;
    let meta = root
        .get("metadata")
        .filter(|m| m.is_object())
        .ok_or(AnnotationError::MissingMetadata("metadata"))?;
    let width = metadata_dim(meta, "width")?;
    let height = metadata_dim(meta, "height")?;
    let scene_id = meta
        .get("img_name")
        .and_then(Value::as_str)
        .map(scene_id_from_name)
        .or_else(|| meta.get("scene_id").and_then(Value::as_str))
        .ok_or(AnnotationError::MissingMetadata("img_name"))?
        .to_string();

    let features = match root.get("features").and_then(|f| f.get("xy")) {
        Some(Value::Array(items)) => items.as_slice(),
        Some(_) => return Err(AnnotationError::MalformedJson("features.xy is not a list".into())),
        None => return Err(AnnotationError::MalformedJson("missing features.xy".into())),
    };

    let (w, h) = (f64::from(width), f64::from(height));
    let mut seen = HashSet::new();
    let mut buildings = Vec::with_capacity(features.len());
    for (index, feature) in features.iter().enumerate() {
        let text = feature.get("wkt").and_then(Value::as_str).ok_or_else(|| {
            AnnotationError::MalformedJson(format!("feature {index} has no `wkt` string"))
        })?;
        let geometry =
            parse_wkt_polygon(text).map_err(|source| AnnotationError::Geometry { index, source })?;
        if let Some(p) = geometry
            .points()
            .find(|p| p.x < -w || p.x > 2.0 * w || p.y < -h || p.y > 2.0 * h)
        {
            return Err(AnnotationError::OutOfBounds {
                index,
                x: p.x,
                y: p.y,
                width,
                height,
            });
        }

        let props = feature.get("properties");
        let subtype = match props.and_then(|p| p.get("subtype")) {
            None | Some(Value::Null) => DamageSubtype::NoDamage,
            Some(Value::String(s)) => s.parse().map_err(|subtype| {
                AnnotationError::UnknownSubtype { index, subtype }
            })?,
            Some(other) => {
                return Err(AnnotationError::UnknownSubtype {
                    index,
                    subtype: other.to_string(),
                })
            }
        };
        let uid = props
            .and_then(|p| p.get("uid"))
            .and_then(Value::as_str)
            .map_or_else(|| format!("building-{index:05}"), str::to_string);
        if !seen.insert(uid.clone()) {
            return Err(AnnotationError::DuplicateUid(uid));
        }
        buildings.push(BuildingAnnotation {
            uid,
            geometry,
            subtype,
        });
    }

    Ok(AnnotationSet {
        scene_id,
        image_width: width,
        image_height: height,
        buildings,
    })
}

/// Writes an annotation set in the label-file layout `parse_label_file` reads.
pub fn write_label_file(set: &AnnotationSet) -> Vec<u8> {
    let xy: Vec<Value> = set
        .buildings
        .iter()
        .map(|b| {
            serde_json::json!({
                "properties": {
                    "feature_type": "building",
                    "subtype": b.subtype.as_str(),
                    "uid": b.uid,
                },
                "wkt": to_wkt(&b.geometry),
            })
        })
        .collect();
    let doc = serde_json::json!({
        "features": { "xy": xy },
        "metadata": {
            "width": set.image_width,
            "height": set.image_height,
            "img_name": format!("{}_post_disaster.png", set.scene_id),
        },
    });
    serde_json::to_vec_pretty(&doc).expect("label document serializes")
}
