//! Linear-time hierarchical video grounding.
//!
//! A from-scratch implementation of a selective state-space encoder with
//! anchor pooling for moment retrieval in long videos: autodiff tensor core,
//! scan kernels, hierarchical encoder blocks, contrastive and detection
//! losses, proposal decoding with soft-NMS, a synthetic episode generator,
//! and a training/evaluation harness. See the `examples/` directory for
//! runnable entry points per capability.

pub mod amp;
pub mod checkpoint;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod model;
pub mod nn;
pub mod ops;
#[doc(hidden)]
pub mod oracles;
pub mod ssm;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{no_grad, Tensor};
