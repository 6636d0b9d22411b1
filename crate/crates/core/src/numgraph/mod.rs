//! Dense tensors and a small reverse-mode differentiation tape.
//!
//! The tape ([`Graph`]) records each operation together with the parents it
//! read from. [`Graph::backward`] walks the tape in reverse insertion order, so
//! every node's local gradient rule runs exactly once. [`Graph::stop_gradient`]
//! inserts a barrier node: its value is a copy of the input, and it never
//! forwards gradient to anything upstream.

pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use graph::{DiffNode, Gradients, Graph, NodeId};
pub use kernels::{sigmoid, softplus as softplus_scalar, Padding};
pub use tensor::Tensor;

use thiserror::Error;

/// Norms at or below this are treated as zero by [`Graph::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: input contains negative values")]
    NegativeInput { op: &'static str },
    #[error("cannot normalize vector with norm {norm:e}")]
    NearZeroNorm { norm: f64 },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a single-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("{0}")]
    InvalidArgument(String),
}

fn eval_unary(
    x: &Tensor,
    op: impl FnOnce(&mut Graph, NodeId) -> Result<NodeId, GraphError>,
) -> Result<Tensor, GraphError> {
    let mut g = Graph::new();
    let id = g.constant(x.clone())?;
    let out = op(&mut g, id)?;
    Ok(g.value(out).clone())
}

pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor, GraphError> {
    let mut g = Graph::new();
    let (x, k) = (g.constant(input.clone())?, g.constant(kernel.clone())?);
    let out = g.conv2d(x, k, stride, padding)?;
    Ok(g.value(out).clone())
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn softplus(x: &Tensor) -> Tensor {
    x.map(kernels::softplus)
}

pub fn gem_pool(d: &Tensor, p: f64) -> Result<Tensor, GraphError> {
    eval_unary(d, |g, x| g.gem_pool(x, p))
}

pub fn fully_connected(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor, GraphError> {
    let mut g = Graph::new();
    let xi = g.constant(x.clone())?;
    let wi = g.constant(weight.clone())?;
    let bi = g.constant(bias.clone())?;
    let out = g.fully_connected(xi, wi, Some(bi))?;
    Ok(g.value(out).clone())
}

pub fn l2_normalize(x: &Tensor) -> Result<Tensor, GraphError> {
    eval_unary(x, |g, id| g.l2_normalize(id))
}
