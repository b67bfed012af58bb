//! Minimal neural-network substrate: named f64 parameter arrays, the tiny
//! reference CNN with manual backprop, a bidirectional LSTM, and the
//! checkpoint container. Everything is plain loops over `Vec<f64>` so the
//! gradient contracts stay exact and auditable.

pub mod checkpoint;
pub mod encoder;
pub mod lstm;
pub mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use encoder::{EncoderConfig, EncoderKind, ProjectionKind};
pub use params::{Array, ParameterSet};
