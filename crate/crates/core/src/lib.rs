//! Classifier training with an intra-class variance term whose class
//! centroids are ordinary trainable parameters of a Hadamard layer.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod arch;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod losses;
pub mod optim;
pub mod report;
pub mod stats;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use losses::{CentroidBank, LossBreakdown};
pub use tensor::{Scalar, Tensor, TensorError};
