//! Adversarial fine-tuning of a compact one-stage detector through
//! self-distilled feature alignment.

pub mod align;
pub mod attack;
pub mod boxes;
pub mod data;
pub mod detcore;
mod error;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod par;
mod real;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
