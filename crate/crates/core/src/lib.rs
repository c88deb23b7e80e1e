//! Neural mean embedding estimators for causal effects under back-door and
//! front-door adjustment.
//!
//! The outcome regression `g` is fit as a linear head over tensor products of
//! learned feature maps, `ĝ(a, x) = ŵᵀ(φ_A(a) ⊗ φ_X(x))`, with `ŵ` profiled out
//! in closed form. Causal parameters then reduce to contracting `ŵ` with
//! (conditional) feature means: empirical averages for marginal laws, and a
//! second regression for conditional ones.
//!
//! Module map:
//! - [`linalg`]: vectors, matrices, tensor products, ridge solves.
//! - [`nn`]: feature maps with reverse-mode gradients and Adam.
//! - [`stage1`]: profiled outcome regression.
//! - [`stage2`]: marginal and conditional feature embeddings.
//! - [`estimators`]: ATE / ATT / CATE contractions.
//! - [`dgp`]: synthetic structural models with ground truth.
//! - [`harness`]: configuration, experiment pipelines and reports.

pub mod data;
pub mod dgp;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod stage1;
pub mod stage2;

pub use data::{ColumnarDataset, Role};
pub use error::{Error, Result};
