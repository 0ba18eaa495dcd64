//! Dense image-to-point-cloud registration.
//!
//! The pipeline embeds an image and a point cloud into a shared descriptor
//! space, detects the mutually visible (overlapping) pixels and points,
//! builds dense 2D-3D correspondences by nearest-neighbour search in
//! descriptor space, and recovers the camera pose with EPnP inside RANSAC.
//!
//! Modules, bottom-up:
//!
//! - [`geometry`]: pinhole projection, rigid transforms, frustum labelling,
//!   ground-truth sampling and the on-disk cloud/pose/intrinsics formats.
//! - [`encoder`]: toy-scale hierarchical encoders, cross-attention fusion,
//!   decoders and overlap detection, all built on a small reverse-mode tape.
//! - [`loss`]: cosine-distance descriptor loss with hard-negative mining,
//!   detector loss and their weighted sum.
//! - [`matcher`]: descriptor nearest-neighbour correspondence.
//! - [`pnp`]: EPnP and the RANSAC wrapper.
//! - [`metrics`]: RTE/RRE, recall curves, feature-matching recall,
//!   overlap precision/recall/F2 and histograms.
//! - [`harness`]: synthetic scenes, oracle descriptors, toy training,
//!   configuration and the registration/evaluation drivers.

pub mod encoder;
pub mod geometry;
pub mod harness;
pub mod kv;
pub mod loss;
pub mod matcher;
pub mod metrics;
pub mod pnp;

pub use geometry::{ImageSpec, Intrinsics, PointCloud, RigidTransform};
