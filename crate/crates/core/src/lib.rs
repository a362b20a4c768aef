//! Semantic point painting for LiDAR/camera fusion.
//!
//! Points are painted with one-hot class vectors from two sources: a 2D
//! segmentation mask reached through pinhole projection, and 3D boxes via
//! point-in-box tests. A small attention network then decides, per voxel,
//! how much to trust each source before the labels are handed to a
//! downstream consumer.
//!
//! Module map:
//!
//! - [`geometry`]: camera calibration and LiDAR-to-pixel projection.
//! - [`painting`]: 2D and 3D painting plus label-flip corruption.
//! - [`voxelgrid`]: fixed-slot voxelization of painted clouds.
//! - [`neuralcore`]: dense layers, reverse-mode tape, AdamW.
//! - [`fusion`]: the attention gate and the per-point classifier head.
//! - [`synthbench`]: synthetic scenes with controllable 2D/3D failure modes.
//! - [`trainer`]: end-to-end training and point-label evaluation.
//! - [`evalmetrics`]: BEV center-distance average precision.
//! - [`formats`]: binary and JSON file formats shared by the CLI.
//! - [`exec`]: sequential / rayon execution policy.

// `!(x > 0.0)` style checks are how inputs reject NaN alongside bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evalmetrics;
pub mod exec;
pub mod formats;
pub mod fusion;
pub mod geometry;
pub mod neuralcore;
pub mod painting;
pub mod synthbench;
pub mod trainer;
pub mod voxelgrid;

pub use error::{Error, Result};
pub use exec::Exec;
