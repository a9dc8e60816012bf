//! Grade prediction from historical student-course grade data.
//!
//! The crate builds course-specific training designs from grade records,
//! fits sparse non-negative (or GPA-centered) linear models, student-specific
//! models, and global or course-specific biased matrix factorizations, and
//! evaluates them with pooled and per-course RMSE.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod ingest;
pub mod model_text;
pub mod predictors;
pub mod solvers;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
