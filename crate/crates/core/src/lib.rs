//! Desk-scale laboratory for transformer knowledge distillation.
//!
//! The crate bundles a small reverse-mode autodiff tape, a multi-head
//! transformer encoder that records every intermediate the distillation
//! losses consume, block-based teacher-to-student layer mappings, the
//! embedding/hidden/attention/prediction losses, synthetic tasks with their
//! metrics, and the two-substage distillation pipeline.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod mapping;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod stream;
pub mod suite;
pub mod sweep;
pub mod tape;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
