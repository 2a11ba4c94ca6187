//! Fusion, alignment, diversity and evaluation tools for heterogeneous
//! detector ensembles.

pub mod ccl;
pub mod consensus;
pub mod diversity;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod synthetic;
pub mod types;
pub mod vulnerability;

pub use error::{Error, Result};
pub use types::*;
