//! Isometric convolutional networks and the machinery for separating input
//! resolution from internal resolution: exact operator-level equivalences,
//! multiplier algebra, static cost and receptive-field analysis, and a
//! deterministic desk-scale training harness.

pub mod analyzer;
pub mod arch;
pub mod data;
pub mod equivalence;
mod error;
pub mod net;
pub mod ops;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
