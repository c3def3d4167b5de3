//! Targeted removal and addition of task knowledge in a small transformer
//! through low-rank task subspaces.

pub mod config;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod persistence;
pub mod subspace;
pub mod tasks;
pub mod training;

pub use error::{Error, FormatError, Result};
