//! Reconstruction of 2D point-source models from 1D projections taken at
//! unknown, uniformly random angles.
//!
//! The pipeline estimates rotation-invariant features from the projection
//! lines ([`features`]), turns them into distances ([`pbde`]) or distance
//! distributions ([`dde`]), and recovers point locations on a grid from the
//! distributions ([`udgp`]).

pub mod dde;
pub mod error;
pub mod experiment;
pub mod features;
pub mod geometry;
pub mod metrics;
pub mod projector;
pub mod rng;
pub mod pbde;
pub mod specfun;
pub mod udgp;

pub use error::{Error, Result};
