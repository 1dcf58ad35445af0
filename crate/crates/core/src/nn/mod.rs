//! Tensor layers with explicit forward and backward passes.
//!
//! Every layer caches what its backward pass needs during [`Layer::forward`]
//! (training mode). [`Layer::infer`] is the evaluation-mode path and leaves
//! the layer untouched, so a model can be shared read-only for scoring.
//! Composite blocks call their children's backward passes in reverse order.

mod activation;
mod aam;
mod blocks;
mod conv;
mod gemm;
mod linear;
mod loss;
mod norm;
mod pooling;
mod tensor;

pub use aam::{aam_logits, AamConfig, AamHead};
pub use activation::{Relu, Sigmoid, Tanh};
pub use blocks::{ConvReluBn1d, Res2Block, SeBlock, SeRes2Block};
pub use conv::{Conv1d, Conv2d};
pub use linear::Linear;
pub use loss::{cross_entropy, softmax, softmax_cross_entropy};
pub use norm::BatchNorm;
pub use pooling::{weighted_statistics, AttentiveStatsPool, StatsPool};
pub use tensor::{Parameter, Tensor};

pub(crate) use gemm::gemm;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Callback receiving a dotted parameter name and the parameter.
pub type ParamVisitor<'a> = dyn FnMut(&str, &mut Parameter) + 'a;
/// Callback receiving a dotted buffer name (running statistics) and the buffer.
pub type BufferVisitor<'a> = dyn FnMut(&str, &mut Tensor) + 'a;

pub trait Layer {
    /// Training-mode forward; caches activations for [`Layer::backward`].
    fn forward(&mut self, x: &Tensor) -> Result<Tensor>;

    /// Evaluation-mode forward.
    fn infer(&self, x: &Tensor) -> Result<Tensor>;

    /// Accumulates parameter gradients and returns the gradient w.r.t. the
    /// input of the most recent [`Layer::forward`] call.
    fn backward(&mut self, grad: &Tensor) -> Tensor;

    fn visit_params(&mut self, _f: &mut ParamVisitor<'_>) {}

    fn visit_buffers(&mut self, _f: &mut BufferVisitor<'_>) {}
}

/// Visits a child's parameters with `prefix.` prepended to every name.
pub(crate) fn visit_child_params(prefix: &str, child: &mut dyn Layer, f: &mut ParamVisitor<'_>) {
    child.visit_params(&mut |name, p| f(&format!("{prefix}.{name}"), p));
}

pub(crate) fn visit_child_buffers(prefix: &str, child: &mut dyn Layer, f: &mut BufferVisitor<'_>) {
    child.visit_buffers(&mut |name, b| f(&format!("{prefix}.{name}"), b));
}

/// He-uniform initialization, bound `sqrt(6 / fan_in)`.
pub(crate) fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("shape matches")
}

pub(crate) fn cached<'a, T>(slot: &'a Option<T>, layer: &str) -> &'a T {
    slot.as_ref().unwrap_or_else(|| panic!("{layer}: backward called without a preceding forward"))
}
