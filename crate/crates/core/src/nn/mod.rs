//! Hand-differentiated building blocks of the detector.
//!
//! Activations are stored channel-major as `[C, N*H*W]` (see [`Act`]) so that a
//! convolution over a block of samples is one matrix product.

mod act;
pub mod conv;
pub mod norm;
pub mod ops;

pub use act::Act;
