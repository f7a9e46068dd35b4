//! Asymmetric-similarity copy detection on synthetic toy images.

// `!(x > 0.0)` is used on purpose in validation so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmark;
pub mod descriptor;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod matcher;
pub mod objectives;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use descriptor::{Descriptor, ImageId, Prediction, RelationKind, RelationLabel};
pub use error::{Error, Result};
