//! Differentiable point-based rendering and scene refinement.
//!
//! A textured point cloud is rasterized as one-pixel splats into a
//! multi-resolution image pyramid, fused into a dense HDR image by a
//! pull-push reconstructor, and converted to LDR by a physically-based
//! tonemapper. Every stage carries an analytic (or finite-difference
//! approximated) backward pass, so image losses can be propagated back to
//! point descriptors, the environment map, point positions, camera poses,
//! camera intrinsics, and sensor parameters.

pub mod autodiff;
pub mod cli;
pub mod discard;
pub mod geometry;
pub mod io;
pub mod optim;
pub mod pipeline;
pub mod raster;
pub mod reconstruct;
pub mod rng;
pub mod scene;
pub mod tonemap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("iteration did not converge: {0}")]
    Convergence(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
