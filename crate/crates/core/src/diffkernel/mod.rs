//! Dense matrices and a small reverse-mode differentiation engine.
//!
//! Every differentiable computation in the crate (the target classifier and
//! the explainer) is written as an [`Expression`]: an append-only DAG of
//! primitive ops over [`Tensor`] leaves. An expression is evaluated against
//! [`Bindings`] that supply values for its named leaves, and gradients of a
//! scalar root are obtained by a single backward sweep.

mod expr;
mod tensor;

pub use expr::{
    evaluate, finite_diff_check, gradients, Bindings, Expression, LeafKind, NodeId,
};
pub(crate) use expr::sigmoid;
pub use tensor::Tensor;
