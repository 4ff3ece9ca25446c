//! Dense row-major `f64` tensors with a recording graph for reverse-mode
//! differentiation.
//!
//! The engine is deliberately small: it supports exactly the operations a
//! pre-norm transformer block, a few pooling heads and the contrastive
//! losses need. Forward values are computed eagerly when an op is recorded;
//! [`Graph::backward`] walks the tape in reverse insertion order.
//!
//! ```
//! use bindlab_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

mod attention;
mod error;
mod gradcheck;
mod graph;
mod params;
mod segment;
mod tensor;

pub use attention::{multi_head_attention, segmented_multi_head_attention, AttentionWeights};
pub use error::TensorError;
pub use gradcheck::{finite_difference_check, finite_difference_check_with, FdOptions, GradCheckReport, Stencil};
pub use graph::{Graph, Var};
pub use params::{AdamW, BoundParams, ParameterSet};
pub use segment::{segments_from_lengths, Segment};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
