//! Minimal dense reverse-mode differentiation in f64.

mod checkpoint;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{NamedTensor, TensorFile, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamGradError, COORDS_PER_PARAM};
pub use params::{ParamId, ParameterStore};
pub use tape::{gelu, BatchStats, Tape, Var, NORM_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
