//! Tree tensor-network structure search.
//!
//! A dense tensor is compressed into a tree of smaller tensors within a
//! relative Frobenius error bound. Candidate topologies are enumerated as
//! sketches of output-directed splits, their ranks are chosen by an exact
//! 0-1 cost model over precomputed singular spectra, and only the most
//! promising completions are executed with truncated SVD and rounded.

pub mod error;
pub mod tensor;
pub mod network;
pub mod dsl;
pub mod sketch;
pub mod rank;
pub mod par;
pub mod search;
pub mod io;

pub use error::{Error, Result};
pub use network::{Partition, TensorNetwork};
pub use tensor::{Index, IndexId, Tensor};
