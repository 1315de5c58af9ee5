//! Test-time adaptation engine and corruption-robustness benchmark for
//! video classification, built on a self-contained autodiff tensor core.
//!
//! The crate provides:
//! - [`autodiff`]: dense f32 tensors with a define-by-run reverse-mode tape;
//! - [`nn`]: 3-D conv blocks, dual-statistics normalization, time-only
//!   non-local attention and parameter-group partitioning;
//! - [`model`]: a small residual 3-D conv video classifier plus training;
//! - [`data`]: a procedural moving-shapes video dataset and frame samplers;
//! - [`corrupt`]: a 9-kind, 5-severity corruption suite;
//! - [`adapt`]: BN / Tent / SHOT baselines and the temporal-coherent
//!   dual-pathway optimizer;
//! - [`eval`]: accuracy / mPC evaluation, coherence reports, checkpoints.

pub mod adapt;
pub mod autodiff;
pub mod corrupt;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;

pub use error::{Result, TecoError};
