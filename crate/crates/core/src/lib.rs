//! Numerical laboratory for patch association in a positional-attention
//! transformer trained on spatially structured synthetic data.
//!
//! * [`distribution`]: partitions, the data distribution and its labeling function.
//! * [`model`]: the transformer, its loss and hand-derived gradients.
//! * [`trainer`]: full-batch gradient descent and value-only transfer.
//! * [`idealized`]: scalar recursions for the symmetric population dynamics.
//! * [`analysis`]: patch association, alignment and accuracy metrics.
//! * [`constructions`]: linear baseline, spurious transformer, sample-complexity sweep.
//! * [`harness`]: configuration, experiment drivers and file output for the CLI.

pub mod analysis;
pub mod constructions;
pub mod distribution;
pub mod error;
pub mod harness;
pub mod idealized;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
