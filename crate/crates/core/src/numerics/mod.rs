//! Dense arrays, reverse-mode autodiff and the Adam optimizer.

pub mod adam;
pub mod array;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use array::DenseArray;
pub use params::{BoundParams, ParameterSet};
pub use tape::{surrogate_term, Tape, Var, LAYER_NORM_EPS};
