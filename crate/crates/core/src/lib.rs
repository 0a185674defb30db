//! Particle ensembles, density transport and the diagnostics that tie them
//! together.
//!
//! The crate simulates the same motion three ways: as particles following
//! `dx/dt = v(t, x)`, as a density solving the continuity equation, and as
//! a stochastic ensemble driven by Brownian or polynomial-of-Brownian noise.
//! The [`analysis`] module turns the relations between those descriptions
//! into measurable checks.
//!
//! Data-parallel loops run on rayon when the `parallel` feature is enabled
//! (the default). Every reduction is blocked with a fixed block size, so
//! results are bit-identical with and without the feature.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod density;
mod error;
pub mod fields;
pub mod jet;
pub mod noise;
pub mod par;
pub mod particles;
pub mod quadrature;
pub mod stats;
pub mod transport;

pub use error::{Error, Result};
