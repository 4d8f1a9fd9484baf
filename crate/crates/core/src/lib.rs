//! Temporal Gaussian Hierarchy.
//!
//! A 4D Gaussian splatting toolkit for long volumetric videos. Primitives are
//! filed into a multi-level temporal segmentation so that the set touched at
//! any timestamp has a bounded size regardless of the video length.
//!
//! Module map:
//! - [`gaussians`]: the 4D primitive and its closed-form math.
//! - [`sh`]: real spherical-harmonics bases of degree 1 to 3.
//! - [`hierarchy`]: levels, segments, placement and per-timestamp queries.
//! - [`renderer`]: a deterministic software splatting rasterizer with gradients.
//! - [`loss`]: MSE / SSIM objective and image metrics.
//! - [`appearance`]: the sparse residual-SH gate.
//! - [`optimizer`]: Adam, adaptive density control and the training loop.
//! - [`codec`]: the `.tgh` on-disk model format.
//! - [`scene_io`]: scene descriptions, point clouds and the synthetic scene generator.
//! - [`bench`]: working-set and query-latency measurements.

pub mod appearance;
pub mod bench;
pub mod camera;
pub mod codec;
pub mod error;
pub mod gaussians;
pub mod hierarchy;
pub mod image;
pub mod loss;
pub mod optimizer;
pub mod renderer;
pub mod scene_io;
pub mod sh;

pub use camera::Camera;
pub use error::{Error, Result};
pub use gaussians::{ConditionedGaussian3D, Gaussian4D, InfluenceRange};
pub use hierarchy::{GaussianId, Hierarchy, Placement, WorkingSet};
pub use image::Image;
