//! Embedding post-processing and biological-relationship benchmarks.

pub mod benchmarks;
pub mod error;
pub mod postprocess;
pub mod report;
pub mod table;

pub use error::{Error, Result};
