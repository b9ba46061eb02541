//! Continual-learning laboratory: small networks trained through task sequences, with
//! forgetting measured both through task heads and through optimal linear probes.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix
//! it to `f64`, which is what data generation and the runner use.

pub mod analysis;
pub mod continual;
pub mod data;
pub mod diff;
mod error;
pub mod losses;
pub mod models;
pub mod probe;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = diff::Tensor<f64>;
pub type Graph64 = diff::Graph<f64>;
pub type ParamSet64 = diff::ParamSet<f64>;
pub type Network64 = models::Network<f64>;
pub type Snapshot64 = models::Snapshot<f64>;
pub type ProbeResult64 = probe::ProbeResult<f64>;
pub type RunOutput64 = continual::RunOutput<f64>;

pub type Tensor32 = diff::Tensor<f32>;
pub type Network32 = models::Network<f32>;
