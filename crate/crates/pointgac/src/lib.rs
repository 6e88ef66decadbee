//! Clustering-based masked point cloud pretraining at desk scale.
//!
//! The pipeline partitions a point cloud into geometrically homogeneous,
//! non-overlapping patches (Potts-energy segmentation, farthest point
//! sampling, masked entropic optimal transport), embeds the patches with a
//! small point network, and pretrains a teacher-student transformer pair
//! against an online k-means codebook: the teacher's patch features update
//! the codebook and produce soft cluster assignments, the student
//! reconstructs assignments for masked patches, and a KL loss aligns the
//! two. A maintenance mechanism perturbs rarely-updated codebook vectors
//! toward recent teacher features so the codebook stays live.
//!
//! Everything runs on the CPU in f64 with a built-in reverse-mode autodiff
//! tape; fixed seeds give bitwise-reproducible runs.

pub mod codebook;
pub mod config;
pub mod data;
pub mod diffcore;
pub mod embedding;
pub mod error;
pub mod geometry;
pub mod training;
pub mod transport;

pub use config::RunConfig;
pub use diffcore::{Graph, Tensor, Var};
pub use error::{Error, Result};
pub use geometry::{GeometricFeatures, NeighborGraph, PointCloud};
pub use transport::PatchSet;
