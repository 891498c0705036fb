//! Symmetry-equivariant convolutional forecasting for 2D physical dynamics.
//!
//! The crate provides:
//!
//! - a small f64 tensor/autodiff engine ([`tensor`]),
//! - symmetry group elements, representations and their actions on
//!   discretized fields ([`groups`]),
//! - equivariant convolution mechanisms behind a common strategy trait,
//!   registered by name ([`layers`]),
//! - forecasting models with autoregressive rollout and training ([`models`]),
//! - a heat-diffusion data generator and transformed test sets ([`dynamics`]),
//! - physics-consistency metrics ([`metrics`]).

pub mod dynamics;
pub mod groups;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod tensor;
