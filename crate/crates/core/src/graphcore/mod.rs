//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is built once per computation shape, then evaluated with
//! different [`Bindings`] for its named inputs. [`backward`] walks the
//! recorded nodes in reverse to produce a [`GradientMap`].

mod gradcheck;
mod graph;
mod tensor;

use thiserror::Error;

pub use gradcheck::{
    central_differences, compare, grad_check, numeric_gradient, relative_error, GradCheckReport, ParamCheck,
};
pub use graph::{backward, backward_seeded, evaluate, Bindings, Evaluation, GradientMap, Graph, NodeId};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: String,
        op: &'static str,
        detail: String,
    },
    #[error("input `{0}` is not bound")]
    Unbound(String),
    #[error("input `{name}` bound with shape {found:?}, expected {expected:?}")]
    BindingShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("name `{0}` already used in this graph")]
    DuplicateName(String),
    #[error("node #{0} is not part of this graph")]
    UnknownNode(usize),
    #[error("`{0}` is not an input of this graph")]
    NotAnInput(String),
    #[error("backward needs a scalar output, node {node} has shape {shape:?}")]
    NonScalarOutput { node: String, shape: Vec<usize> },
    #[error("evaluation does not belong to this graph")]
    StaleEvaluation,
    #[error("non-finite value produced at node {0}")]
    NonFinite(String),
}
