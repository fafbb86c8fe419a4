//! Segmented dynamic relational inference for multi-agent trajectories.
//!
//! A variational model that splits every directed agent pair's timeline into
//! segments of inferred duration and assigns each segment one discrete
//! interaction type. Forcing every segment to last one step recovers the
//! per-step dynamic relational inference baseline.

pub mod decoder;
pub mod edges;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numeric;
pub mod segmenter;
pub mod sim;
pub mod training;

pub use error::{Error, Result};
