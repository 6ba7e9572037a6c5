//! Learned SIRT reconstruction for parallel-beam and cone-beam CT.
//!
//! The crate provides the linear projection operators, classical FBP/FDK and
//! SIRT baselines, a small convolutional network with hand-written gradients,
//! the learned SIRT iteration with its training loop, phantom generation,
//! and image-quality metrics.

pub mod classic;
pub mod error;
pub mod geometry;
pub mod io;
pub mod lsirt;
pub mod metrics;
pub mod nn;
pub mod phantoms;
pub mod projector;
pub mod rng;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{ConeBeamGeometry, Geometry, GridSpec, ParallelGeometry2D};
pub use projector::{Projector, SirtScaling};
pub use rng::RngSeed;
pub use volume::{Sinogram, Volume};
