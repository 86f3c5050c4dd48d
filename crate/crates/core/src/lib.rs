//! Sparse convolutional feature hierarchies.
//!
//! Building blocks for multi-stage recognition networks whose filters are
//! learned by predictive sparse decomposition (optionally with a
//! discriminative term), by plain or sparse-state supervised training, or
//! left random. Includes contrast normalization, pyramid pooling and
//! feature-map inversion.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arch;
pub mod codec;
pub mod data;
pub mod dpsd;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod invert;
pub mod linalg;
pub mod net;
pub mod nonlin;
pub mod norm;
pub mod pool;
pub mod solver;
pub mod tensor;
pub mod train;

pub use arch::{Arch, Protocol};
pub use data::Dataset;
pub use dpsd::Checkpoint;
pub use error::{Error, Result};
pub use net::Model;
pub use tensor::{ConnectionTable, KernelBank, Tensor3};
pub use train::{MetricRow, TrainConfig};
