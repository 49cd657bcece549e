//! Robust action selection under model ambiguity.
//!
//! The crate implements a control stack that plans against every dynamics
//! distribution inside a KL ball around a learned nominal kernel instead of
//! the nominal alone: maximally diffusive reference kernels ([`pmax`]), the
//! scalar convex dual pricing worst-case cost over the ball ([`ambiguity`]),
//! a Gibbs policy over sampled action candidates ([`policy`]), Gaussian
//! regression models with replay ([`models`], [`replay`]), desk-scale
//! simulators ([`envs`]), and the training/evaluation loops ([`run`]) driven
//! by flat TOML configs ([`config`]).
//!
//! Data-parallel inner loops (candidate evaluation, rollouts, seeds) go
//! through [`exec`], which uses rayon when the default `parallel` feature is
//! enabled and a sequential lane otherwise; results are identical either way.

pub mod ambiguity;
pub mod config;
pub mod envs;
pub mod error;
pub mod exec;
pub mod gaussian;
pub mod models;
pub mod pmax;
pub mod policy;
pub mod replay;
pub mod rng;
pub mod run;

pub use error::{CoreError, Result};

// Re-exported so downstream crates build against the same linear algebra types.
pub use nalgebra;
