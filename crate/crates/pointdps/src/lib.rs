//! Point cloud reconstruction from heterogeneous observations.
//!
//! The library combines a diffusion prior over 3D point clouds with
//! assignment-based observation energies (2D projections, coarse models,
//! subunits) and a predictor-corrector reverse sampler. Everything is
//! deterministic given a seed: randomness flows through [`rng::RandomSource`]
//! streams, so multi-chain runs reproduce bit for bit regardless of the
//! thread count.

pub mod assignment;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod geom;
pub mod likelihood;
pub mod net;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};
