//! Radar-only 3D semantic perception toolkit.
//!
//! The crate covers the whole desk-scale pipeline: procedural agricultural
//! scenes and LiDAR ground truth ([`scene`]), spectral-domain radar cube
//! synthesis and CA-CFAR ([`radar`]), sparse Cartesian voxel tensors
//! ([`grid`]), multi-frame non-coherent accumulation ([`preprocess`]),
//! Stage-I supervision targets ([`supervision`]), EDM diffusion and
//! consistency sampling ([`diffusion`]), the two learning stages wired
//! together ([`pipeline`]) and threshold-matched point cloud metrics
//! ([`metrics`]).
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled (default) and plain iterators otherwise.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod metrics;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod preprocess;
pub mod radar;
pub mod scene;
pub mod supervision;

pub use error::{Error, Result};
pub use geometry::{ClassLabel, PoseSE3, SemanticPointCloud, NUM_CLASSES};
