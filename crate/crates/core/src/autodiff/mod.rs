//! Dense tensors with reverse-mode differentiation.

pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_params, grad_check_report, GradCheck};
pub use optim::{AdamW, CosineSchedule};
pub use params::{read_checkpoint_bytes, write_checkpoint_bytes, Bound, ParamId, ParamKind, ParamStore};
pub use tape::{Activation, Counters, Grads, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
