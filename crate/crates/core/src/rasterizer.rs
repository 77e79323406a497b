//! Polygon to class-mask rasterization.
//!
//! A pixel `(row, col)` belongs to a polygon iff its center
//! `(col + 0.5, row + 0.5)` is inside under the even-odd rule. Each edge
//! covers the half-open span `[ymin, ymax)`, so two polygons sharing an
//! edge never both claim a pixel whose center lies on it.

use std::path::Path;

use image::{GrayImage, ImageBuffer};
use serde::{Deserialize, Serialize};

use crate::annotations::{map_damage_class, AnnotationSet, ClassScheme, Point2D, PolygonGeom};

/// Single-channel class raster, row-major, one byte per pixel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DamageMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl DamageMask {
    pub fn new(width: usize, height: usize, fill: u8) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Option<Self> {
        (data.len() == width * height).then_some(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        self.data[row * self.width + col] = value;
    }

    /// Mirrors the mask left to right.
    pub fn flip_horizontal(&mut self) {
        for row in self.data.chunks_exact_mut(self.width) {
            row.reverse();
        }
    }

    pub fn to_image(&self) -> GrayImage {
        ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length matches dimensions")
    }

    pub fn from_image(img: &GrayImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().clone(),
        }
    }

    pub fn save_png(&self, path: &Path) -> image::ImageResult<()> {
        self.to_image().save_with_format(path, image::ImageFormat::Png)
    }

    pub fn load_png(path: &Path) -> image::ImageResult<Self> {
        let img = image::open(path)?.into_luma8();
        Ok(Self::from_image(&img))
    }

    /// Nearest-neighbour resampling; label rasters are never interpolated.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        let img = image::imageops::resize(
            &self.to_image(),
            width as u32,
            height as u32,
            image::imageops::FilterType::Nearest,
        );
        Self::from_image(&img)
    }

    /// Count of pixels per value, indexed by the byte value.
    pub fn histogram(&self) -> [u64; 256] {
        let mut h = [0u64; 256];
        for &v in &self.data {
            h[usize::from(v)] += 1;
        }
        h
    }
}

pub fn scale_polygon(poly: &PolygonGeom, src_w: u32, src_h: u32, dst_w: u32, dst_h: u32) -> PolygonGeom {
    let sx = f64::from(dst_w) / f64::from(src_w);
    let sy = f64::from(dst_h) / f64::from(src_h);
    let scale = |ring: &[Point2D]| -> Vec<Point2D> {
        ring.iter()
            .map(|p| Point2D {
                x: p.x * sx,
                y: p.y * sy,
            })
            .collect()
    };
    PolygonGeom {
        exterior: scale(&poly.exterior),
        interiors: poly.interiors.iter().map(|r| scale(r)).collect(),
    }
}

/// Boolean coverage grid produced by [`fill_polygon`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coverage {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<bool>,
}

impl Coverage {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
}

/// Visits every pixel whose center lies inside `poly`.
fn scan_polygon(poly: &PolygonGeom, width: usize, height: usize, mut visit: impl FnMut(usize, usize)) {
    let mut edges: Vec<(Point2D, Point2D)> = Vec::new();
    for ring in poly.rings() {
        for (i, &a) in ring.iter().enumerate() {
            let b = ring[(i + 1) % ring.len()];
            if a.y != b.y {
                edges.push((a, b));
            }
        }
    }
    if edges.is_empty() {
        return;
    }
    let ymin = edges.iter().map(|(a, b)| a.y.min(b.y)).fold(f64::INFINITY, f64::min);
    let ymax = edges.iter().map(|(a, b)| a.y.max(b.y)).fold(f64::NEG_INFINITY, f64::max);
    // One row of slack each side; the crossing test below is exact.
    let first_row = ((ymin - 0.5).ceil() - 1.0).max(0.0) as usize;
    let last_row = (((ymax - 0.5).ceil() + 1.0).max(0.0) as usize).min(height);

    let mut xs: Vec<f64> = Vec::new();
    for row in first_row..last_row {
        let py = row as f64 + 0.5;
        xs.clear();
        for (a, b) in &edges {
            if (a.y > py) != (b.y > py) {
                xs.push(a.x + (py - a.y) * (b.x - a.x) / (b.y - a.y));
            }
        }
        xs.sort_by(f64::total_cmp);
        for span in xs.chunks_exact(2) {
            let (left, right) = (span[0], span[1]);
            let mut col = (left - 0.5).floor().max(0.0) as usize;
            while col < width {
                let px = col as f64 + 0.5;
                if px >= right {
                    break;
                }
                if px >= left {
                    visit(row, col);
                }
                col += 1;
            }
        }
    }
}

/// Even-odd scanline fill sampled at pixel centers.
pub fn fill_polygon(poly: &PolygonGeom, width: usize, height: usize) -> Coverage {
    let mut cells = vec![false; width * height];
    scan_polygon(poly, width, height, |r, c| cells[r * width + c] = true);
    Coverage {
        width,
        height,
        cells,
    }
}

/// Severity rank used for overlap resolution: the ignore label beats
/// everything, otherwise the larger class wins.
fn rank(value: u8, ignore: u8) -> u16 {
    if value == ignore {
        u16::MAX
    } else {
        u16::from(value)
    }
}

/// Renders every building at `dst_w x dst_h`. Overlaps resolve to the
/// highest damage class regardless of draw order.
pub fn render_mask(annots: &AnnotationSet, dst_w: u32, dst_h: u32, scheme: ClassScheme) -> DamageMask {
    let (w, h) = (dst_w as usize, dst_h as usize);
    let ignore = scheme.ignore_label();
    let mut mask = DamageMask::new(w, h, scheme.background());
    for b in &annots.buildings {
        let class = map_damage_class(b.subtype, scheme);
        let poly = scale_polygon(&b.geometry, annots.image_width, annots.image_height, dst_w, dst_h);
        let data = &mut mask.data;
        scan_polygon(&poly, w, h, |r, c| {
            let px = &mut data[r * w + c];
            if rank(class, ignore) > rank(*px, ignore) {
                *px = class;
            }
        });
    }
    mask
}
