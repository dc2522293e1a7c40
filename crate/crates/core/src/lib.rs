//! Active target discovery on grid search spaces, driven by a diffusion
//! prior, a particle belief and an online reward model.

// Negated comparisons double as NaN rejection in input checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod belief;
pub mod bench;
pub mod diffusion;
pub mod env;
pub mod error;
pub mod layout;
pub mod policy;
pub mod reward;
pub mod scalar;
pub mod seed;
pub mod validation;

pub use error::{Error, Result};
pub use layout::Layout;
pub use scalar::Scalar;

pub type NoiseSchedule64 = diffusion::NoiseSchedule<f64>;
pub type NoiseSchedule32 = diffusion::NoiseSchedule<f32>;
pub type Prior64 = diffusion::GaussianMixturePrior<f64>;
pub type Prior32 = diffusion::GaussianMixturePrior<f32>;
pub type ParticleBatch64 = belief::ParticleBatch<f64>;
pub type ParticleBatch32 = belief::ParticleBatch<f32>;
pub type RewardNet64 = reward::RewardNet<f64>;
pub type RewardNet32 = reward::RewardNet<f32>;
pub type Scene64 = env::Scene<f64>;
pub type Scene32 = env::Scene<f32>;
