//! Hypergraph convolutional networks with a learnable Laplacian adaptor.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors and a reverse-mode differentiation tape.
//! - [`hypergraph`]: incidence structure, degrees, propagation matrix and
//!   normalized Laplacian.
//! - [`herald`]: the adaptor that re-estimates a soft incidence matrix from
//!   node features and blends its propagation matrix with the original one.
//! - [`model`]: stacked spectral convolution layers with optional adaptors
//!   and a summation readout for graph-level tasks.
//! - [`data`]: dataset formats, TU benchmark parsing, splits and folds.
//! - [`train`]: optimizers, training loops, evaluation and run records.

pub mod data;
pub mod error;
pub mod herald;
pub mod hypergraph;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
