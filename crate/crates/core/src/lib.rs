//! Two mathematically equivalent attention kernels -- classic scaled
//! dot-product attention and its Gaussian-distance "projection" rewrite --
//! with hand-written backward passes, a toy encoder-decoder transformer
//! built on either kernel, and a training/evaluation pipeline.

pub mod attention;
pub mod error;
pub mod model;
pub mod numerics;
pub mod pipeline;

pub use error::{Error, Result};
pub use numerics::{Parameter, RngState, Tensor};
