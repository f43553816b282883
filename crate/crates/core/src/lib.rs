//! Lifelong few-shot customization of a small conditional diffusion model.

pub mod checkpoint;
pub mod concepts;
pub mod config;
pub mod error;
pub mod eval;
pub mod harness;
pub mod icgen;
pub mod latent;
mod linalg;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, FieldError, Result};
pub use latent::Latent;
