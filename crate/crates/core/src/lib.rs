//! Slice-level self-supervised pretraining for volumetric CT data, plus the
//! downstream CNN → Bi-LSTM multi-organ injury classifier and its evaluation
//! suite, sized so every formula and training procedure runs and is verified
//! on a CPU in seconds to minutes.
//!
//! The pretext task: tile an axial slice with a grid of non-overlapping base
//! crops, sample a random crop on the same slice, and train embeddings so that
//! the cosine similarity between the random-crop embedding and each base-crop
//! embedding matches their spatial IoU. A momentum (EMA) teacher provides
//! stable targets. The pretrained backbone then feeds per-slice features into
//! a bidirectional LSTM with three per-organ classification heads.

pub mod classifier;
pub mod crop;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod pretrain;
pub mod rng;

pub use error::{Error, Result};
