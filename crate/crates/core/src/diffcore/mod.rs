//! Minimal reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records primitive applications in evaluation order, which is
//! already a topological order, so `backward` is a single reverse sweep.
//! Parameters live in a [`ParamStore`] and are bound into a graph per step.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig, StepOutcome};
pub use checkpoint::{load_tensors, read_tensors, save_tensors, write_tensors, MAGIC};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use graph::{Gradients, Graph, Mutation, Primitive, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("{op}: wrong number of inputs ({got})")]
    Arity { op: &'static str, got: usize },
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("loss must have exactly one element, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is not connected to any tensor that requires a gradient")]
    NotConnected,
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("soft-update rate {0} outside [0, 1]")]
    InvalidTau(f64),
    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidEps(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
