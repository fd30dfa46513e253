//! A minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! The engine is a tape: forward ops append nodes to a [`Graph`], each node
//! optionally carrying a closure that scatters the output gradient to its
//! parents. [`Graph::backward`] walks the tape in reverse creation order
//! (which is a reverse topological order by construction) and visits every
//! node once, accumulating gradients additively.
//!
//! Tensors are row-major and come in two numeric modes via the [`Scalar`]
//! parameter: `f64` for tests and gradient checks, `f32` for training speed.
//! A graph and its tensors are confined to one thread; parameters are plain
//! arrays outside the graph and may be shared read-only.

mod checkpoint;
mod graph;
pub mod gradcheck;
mod ops;
mod params;

pub use checkpoint::{load_checkpoint_into, read_checkpoint_entries, save_checkpoint};
pub use graph::{GradStore, Graph, Tensor};
pub use params::{sgd_step, Init, Param, ParamId, ParamStore, Session};

use std::fmt::Debug;

use num_traits::Float;

/// Element type of tensors: `f32` or `f64`.
pub trait Scalar:
    Float + num_traits::NumAssignOps + Debug + Copy + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

pub(crate) fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", dims.join("x"))
}
