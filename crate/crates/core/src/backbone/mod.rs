//! Causal transformer over text words and multi-stream motion tokens.

pub mod generate;
pub mod model;
pub mod probe;
pub mod sequence;
pub mod vocab;

pub use generate::{sample, Generation, Sampling, TargetShape};
pub use model::{Backbone, BackboneConfig, Hidden, Lookup, NllReport, NllTerms, Packed, TokenSum};
pub use probe::{jacobian_dependency_probe, INFLUENCE_THRESHOLD};
pub use sequence::{motion_slots, motion_span_len, slots_to_motion, Sequence, Slot};
pub use vocab::{Special, TokenClass, Vocabulary};

#[cfg(test)]
mod tests;
