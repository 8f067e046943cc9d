//! Minimal tape-based autodiff and parameter storage.

pub mod params;
pub mod tape;

pub use params::{Gradients, Mat, Param, ParamId, ParamStore};
pub use tape::{CustomOp, Tape, Var};
