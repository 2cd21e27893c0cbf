//! Identity attention distraction for face anonymization.
//!
//! The crate implements, at toy scale:
//!
//! * [`classifier`]: a fixed miniature CNN with an analytic gradient at its
//!   last convolutional layer,
//! * [`cam`]: Grad-CAM importance weights and heatmaps,
//! * [`ifa`]: closed-form attention distraction and identity-feature recast,
//! * [`sampler`]: exponential-mechanism delegate sampling over a k-NN
//!   candidate set,
//! * [`geometry`]: 68-point landmark alignment, pose buckets and
//!   pose/expression recovery on a sampled delegate structure,
//! * [`losses`]: the generator's multi-task loss terms as pure functions,
//! * [`eval`]: re-identification, identity-swapping and attribute metrics,
//! * [`fixtures`]: seeded toy identities, images, landmarks and embeddings,
//! * [`pipeline`]: the end-to-end run, K sweeps and ablations.

pub mod cam;
pub mod classifier;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod geometry;
pub mod ifa;
pub mod losses;
pub mod pipeline;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
