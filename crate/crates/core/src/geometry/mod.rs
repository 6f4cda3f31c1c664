//! Pinhole projection, rigid transforms, mesh slab cutting and silhouette
//! rasterization.
//!
//! World (model) space is in millimetres. Image space is in pixels with the
//! origin at the top-left corner, `u` growing rightwards and `v` downwards.
//! Cameras follow the usual computer-vision convention: the camera frame has
//! `x` right, `y` down and `z` along the optical axis.

mod camera;
pub(crate) mod mesh;
mod raster;

pub use camera::{
    backproject_ray, is_rotation, point_to_ray_distance_mm, project, rotation_about,
    rotation_angle_deg, Pinhole, Ray,
};
pub use mesh::{clip_to_half_spaces, cut_mesh_between_planes, Plane, TriMesh};
pub use raster::{rasterize_silhouette, BinaryMask};

pub(crate) use raster::rasterize_window;

use thiserror::Error;

pub type Point3 = nalgebra::Point3<f64>;
pub type Vector3 = nalgebra::Vector3<f64>;
pub type Point2 = nalgebra::Point2<f64>;
pub type Matrix3 = nalgebra::Matrix3<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point projects with non-positive depth {depth}")]
    NonPositiveDepth { depth: f64 },
    #[error("matrix is not a proper rotation")]
    NotARotation,
    #[error("no geometry left after cutting")]
    EmptyResult,
    #[error("invalid camera: {0}")]
    InvalidCamera(&'static str),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("plane normal has zero length")]
    ZeroNormal,
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("malformed {format} data: {reason}")]
    Parse {
        format: &'static str,
        reason: String,
    },
}
