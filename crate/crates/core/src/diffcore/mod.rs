//! Dense tensors and a reverse-mode differentiation engine whose gradients
//! are themselves graphs, so Langevin updates (which contain ∇x E) can be
//! differentiated again with respect to the energy parameters.

mod check;
mod graph;
mod params;
mod tensor;

pub use check::{central_difference, finite_difference_check, relative_error};
pub use graph::{Bindings, Graph, LeafKind, NodeId, ParamNodes};
pub use params::{NamedTensor, ParamSet};
pub use tensor::{broadcast_shape, broadcastable_to, Tensor};

#[allow(unused_imports)]
pub(crate) use graph::{sigmoid, softplus};

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch in {tag}: {detail}")]
    ShapeMismatch { tag: &'static str, detail: String },
    #[error("non-finite value {value} at index {index} in {tag}")]
    NonFinite { tag: &'static str, index: usize, value: f64 },
    #[error("leaf '{name}' is not bound")]
    UnboundLeaf { name: String },
    #[error("gradient root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("cannot differentiate with respect to a {tag} node")]
    NotDifferentiable { tag: &'static str },
    #[error("duplicate parameter name '{0}'")]
    DuplicateParam(String),
    #[error("unknown parameter '{0}'")]
    MissingParam(String),
    #[error("function is not finite at perturbed coordinate {index}")]
    NonFiniteFunction { index: usize },
}
