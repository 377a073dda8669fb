//! Video-level 4D convolutional networks.
//!
//! Action units sampled across a whole video are processed by a shared 3D
//! trunk; residual 4D blocks mix information across units, and a
//! combinatorial inference procedure scores many unit selections per video.

pub mod checks;
pub mod cli;
pub mod error;
pub mod inference;
pub mod network;
pub mod ops;
pub mod oracle;
pub mod sampling;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
