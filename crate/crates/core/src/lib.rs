//! Post-training model size compression.
//!
//! Each weight tensor goes through a learnable lossy transform
//! (`ŵ = T⁻¹(⌊T(w)⌉)`, see [`transform`]) whose parameters are optimized
//! against a distillation loss plus a differentiable estimate of the coded
//! size ([`entropy`]). The resulting integer symbols are then range coded
//! into an `L2CM` archive ([`codec`]) that decodes back to exactly the
//! lossy weights.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
mod bytes;
pub mod calibrate;
pub mod codec;
pub mod entropy;
pub mod error;
pub mod model_io;
pub mod pipeline;
pub mod report;
pub mod toy;
pub mod transform;

pub use error::{Error, Result};
