//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Values are batched row-major matrices. A [`Tape`] records one node per
//! layer primitive (affine map, activation, normalization, projection) and
//! differentiates a scalar output back to every registered parameter. The
//! [`Eager`] evaluator runs the same kernels without recording anything,
//! which is what long evaluation rollouts use.
//!
//! GELU uses the exact form `0.5 x (1 + erf(x / sqrt 2))`, and layer
//! normalization adds `1e-5` to the variance.

pub mod kernels;
mod tape;
mod tensor;

use std::sync::Arc;

pub use kernels::{block_norm, ProjectionBlock, LAYER_NORM_EPS};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;

use crate::error::Result;

/// Operations a network forward pass needs, over either recorded or plain values.
pub trait Graph {
    type Var: Clone;

    fn affine(&mut self, x: &Self::Var, w: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn gelu(&mut self, x: &Self::Var) -> Self::Var;
    fn layer_norm(&mut self, x: &Self::Var, gain: &Self::Var, bias: &Self::Var) -> Result<Self::Var>;
    fn scale(&mut self, x: &Self::Var, s: f64) -> Self::Var;
}

impl Graph for Tape {
    type Var = NodeId;

    fn affine(&mut self, x: &NodeId, w: &NodeId, b: &NodeId) -> Result<NodeId> {
        Tape::affine(self, *x, *w, *b)
    }

    fn gelu(&mut self, x: &NodeId) -> NodeId {
        Tape::gelu(self, *x)
    }

    fn layer_norm(&mut self, x: &NodeId, gain: &NodeId, bias: &NodeId) -> Result<NodeId> {
        Tape::layer_norm(self, *x, *gain, *bias)
    }

    fn scale(&mut self, x: &NodeId, s: f64) -> NodeId {
        Tape::scale(self, *x, s)
    }
}

/// Unrecorded evaluation; intermediate values are dropped as soon as unused.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Graph for Eager {
    type Var = Arc<Tensor>;

    fn affine(&mut self, x: &Arc<Tensor>, w: &Arc<Tensor>, b: &Arc<Tensor>) -> Result<Arc<Tensor>> {
        kernels::affine(x, w, b).map(Arc::new)
    }

    fn gelu(&mut self, x: &Arc<Tensor>) -> Arc<Tensor> {
        Arc::new(kernels::gelu(x))
    }

    fn layer_norm(&mut self, x: &Arc<Tensor>, gain: &Arc<Tensor>, bias: &Arc<Tensor>) -> Result<Arc<Tensor>> {
        kernels::layer_norm(x, gain, bias).map(|(y, _)| Arc::new(y))
    }

    fn scale(&mut self, x: &Arc<Tensor>, s: f64) -> Arc<Tensor> {
        Arc::new(Tensor::from_raw(
            x.shape().to_vec(),
            x.data().iter().map(|v| v * s).collect(),
        ))
    }
}
