//! Chromatic self-attention graph transformer.

pub mod autodiff;
pub mod csa;
pub mod error;
pub mod graph;
pub mod init;
pub mod model;
pub mod precompute;
pub mod rings;
pub mod rpe;
pub mod train;

pub use error::{CgtError, Result};
