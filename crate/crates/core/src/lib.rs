//! Lidar-inertial odometry toolkit.
//!
//! The crate covers the whole path from raw scans to evaluated trajectories:
//! spherical projection into vertex/normal maps, loss-side preprocessing,
//! nearest-neighbor correspondences with point-to-plane and plane-to-plane
//! losses, classical registration, a small learned estimator with an IMU
//! branch, KITTI-format I/O and segment-based error metrics.

pub mod cloud;
pub mod config;
pub mod correspondence;
pub mod dataset_io;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod kdtree;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod range_image;
pub mod registration;
pub mod synth;

pub use cloud::PointCloud;
pub use error::{Error, Result};
pub use geometry::{Pose, PoseVector, Vec3};
