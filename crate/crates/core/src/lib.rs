//! Damage-severity segmentation from paired pre/post-disaster imagery.
//!
//! The pipeline runs label files through [`annotations`] and
//! [`rasterizer`] into class masks, pairs them with stacked pre/post
//! rasters in [`datapipe`], trains the dual-input U-Net in [`network`]
//! with the weighted loss in [`training`], scores it with [`evaluation`]
//! and renders damage maps with [`inference`]. [`fixtures`] synthesizes
//! scenes with exactly known masks.

pub mod annotations;
pub mod datapipe;
pub mod evaluation;
pub mod fixtures;
pub mod inference;
pub mod network;
pub mod rasterizer;
pub mod seed;
pub mod training;
