//! Dense `f64` tensors, a define-by-run reverse-mode tape and optimizers.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters live in a
//! [`ParamStore`] outside the graph; [`Graph::param`] copies a parameter onto
//! the tape and [`ParamStore::accumulate`] adds the gradients from a
//! [`Gradients`] sweep back into the store. Accumulation is additive, so two
//! backward sweeps without [`ParamStore::zero_grads`] double every gradient.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{Optimizer, OptimizerKind, OptimizerState};
pub use params::{read_tensor_table, write_tensor_table, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("target id {target} is outside a vocabulary of {vocab}")]
    TargetOutOfRange { target: u32, vocab: usize },
    #[error("parameter {0} has no gradient")]
    MissingGrad(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("malformed tensor table: {0}")]
    Corrupt(String),
}

/// Numerically stable softmax over the last axis of a plain slice of rows.
pub fn softmax_rows(values: &[f64], width: usize) -> Vec<f64> {
    let mut out = values.to_vec();
    for row in out.chunks_mut(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Log-softmax of a single row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}
