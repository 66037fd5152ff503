//! Differentiable-array substrate.
//!
//! [`Array`] carries values, [`Tape`] records the primitive operation set
//! used by every network in the crate, and [`grad_check`] compares the
//! reverse-mode gradients with central differences.

mod array;
mod gradcheck;
mod params;
mod tape;

pub use array::Array;
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::ParamStore;
pub use tape::{Axis, Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid array: {0}")]
    InvalidArray(String),
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape { op: &'static str, node: usize, detail: String },
    #[error("non-finite value at node {node} ({op}) during {phase}")]
    NonFinite { op: &'static str, node: usize, phase: &'static str },
    #[error("domain error at node {node} ({op}): {detail}")]
    Domain { op: &'static str, node: usize, detail: String },
    #[error("zero-norm row {row} at node {node}")]
    ZeroNorm { node: usize, row: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("gradient check: {0}")]
    GradCheck(String),
}

/// Builds a graph with `build`, then returns the scalar loss value and the
/// reverse-mode gradients of every trainable parameter and input leaf.
pub fn evaluate_with_gradients<F>(params: &ParamStore, build: F) -> Result<(f64, Gradients), TensorError>
where
    F: FnOnce(&mut Tape, &ParamStore) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    let value = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}
