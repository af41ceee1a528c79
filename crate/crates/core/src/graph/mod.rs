//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation whose inputs are tracked. The number
//! of recorded operations is the memory proxy used throughout the crate:
//! it grows with the length of the differentiated computation and is
//! reported by [`Tape::metrics`].
//!
//! ```
//! use std::sync::Arc;
//! use ndarray::array;
//! use rft_core::graph::{ParamKey, Tape, Tensor};
//!
//! let tape = Tape::new();
//! let key = ParamKey { store: 0, index: 0 };
//! let w = tape.param(key, &Arc::new(array![[2.0]]));
//! let y = tape.mul(&w, &Tensor::scalar(3.0)).unwrap();
//! let grads = tape.backward(&y).unwrap();
//! assert_eq!(grads.param(key).unwrap()[[0, 0]], 3.0);
//! ```

pub mod gradcheck;
mod ops;
mod tape;

pub use ops::{huber, sigmoid, softplus, Activation, Dim, OpKind, Reduce};
pub use tape::{GraphMetrics, Gradients, NodeId, ParamKey, Tape, Tensor};

use crate::error::Result;

/// Row-wise L2 normalisation, built from primitive ops so it is
/// differentiable. Rows must be nonzero.
pub fn normalize_rows(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let sq = tape.act(x, Activation::Square)?;
    let norm = tape.act(&tape.reduce(&sq, Reduce::RowSum)?, Activation::Sqrt)?;
    tape.div(x, &norm)
}

/// Row-wise cosine similarity of two equally shaped tensors (r x 1).
pub fn cosine_rows(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let an = normalize_rows(tape, a)?;
    let bn = normalize_rows(tape, b)?;
    tape.reduce(&tape.mul(&an, &bn)?, Reduce::RowSum)
}

/// Mean smooth-Huber distance between two equally shaped tensors.
pub fn huber_mean(tape: &Tape, a: &Tensor, b: &Tensor, delta: f64) -> Result<Tensor> {
    let diff = tape.sub(a, b)?;
    tape.mean(&tape.act(&diff, Activation::Huber(delta))?)
}

/// Mean squared difference.
pub fn mse(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let diff = tape.sub(a, b)?;
    tape.mean(&tape.act(&diff, Activation::Square)?)
}
