//! Looping 3D cinemagraphs from a static Gaussian splatting cloud.
//!
//! The pipeline separates the dynamic part of a cloud with a mask, embeds each
//! Gaussian into a feature space, clusters the Gaussians into SuperGaussians,
//! derives a sparse velocity field from cluster self-similarity, densifies it
//! with ordinary Kriging, refines it with an MLP and finally integrates the
//! resulting Eulerian field forward and backward to build loop-closed frames.

pub mod animate;
mod binio;
pub mod cloud_io;
pub mod error;
pub mod features;
pub mod motionfield;
pub mod neural;
pub mod pipeline;
pub mod renderer;
pub mod supergaussian;
pub mod synthetic;

pub use error::{Error, Result};
