//! Few-shot representation learning from partial observations.
//!
//! The core idea: each view of an item is encoded not as a point but as a
//! diagonal Gaussian (a mean and a per-dimension precision), so a view can
//! inform only part of the representation. Views of the same item are fused
//! by multiplying their Gaussians (a product of experts), and a query view is
//! scored against each fused representation by the log-normalizer of the
//! query-times-product Gaussian overlap. Training minimizes the negative log
//! likelihood of matching queries to the support item they came from. With
//! all precisions fixed to one the objective collapses to a Prototypical
//! Network, which serves as the built-in baseline.
//!
//! The crate ships two benchmark domains at desk scale: a procedural-image
//! corpus with partial crop views, and a gridworld where an agent's
//! egocentric observations along a trajectory are fused into an environment
//! representation (optionally decoded back into a map).
//!
//! Everything runs on a small reverse-mode autodiff kernel over dense f64
//! tensors; no external ML framework is involved.

pub mod autodiff;
pub mod episodes;
pub mod error;
pub mod experiments;
pub mod gaussian;
pub mod gridworld;
pub mod models;
pub mod objective;
pub mod rng;
pub mod selftest;
pub mod trainer;

pub use error::{Error, Result};
