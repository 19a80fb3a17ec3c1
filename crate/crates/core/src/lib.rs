//! Operator learning as conditioned neural fields.
//!
//! The crate provides a small dense-tensor engine with reverse-mode automatic
//! differentiation ([`tensor`]), positional encodings and latent-grid
//! interpolation ([`fields`]), the neural operator architectures expressed on
//! top of them ([`operators`]), plus a training recipe ([`training`]), an
//! analytic advection benchmark ([`data`]) and rollout metrics ([`eval`]).
//!
//! Everything is CPU-only and deterministic: a fixed seed replays the same
//! bits on a given platform.

pub mod data;
pub mod eval;
pub mod fields;
pub mod operators;
pub mod params;
pub mod tensor;
pub mod training;

pub use tensor::{Rng, Scalar, Tensor};
