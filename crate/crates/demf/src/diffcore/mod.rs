//! Dense tensors with reverse-mode gradient accumulation.
//!
//! Everything learnable in this crate is built from the primitives here:
//! a row-major [`Tensor`] carrying values and a lazily allocated gradient,
//! op constructors that register backward rules on a tape-free DAG, an
//! AdamW optimizer, a finite-difference gradient checker, and a binary
//! checkpoint format.

mod checkpoint;
mod gradcheck;
mod ops;
mod optim;
mod rng;
mod tensor;

pub use checkpoint::{
    load_checkpoint, parse_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_MAGIC,
};
pub use gradcheck::{grad_check, GradEntry, GradReport};
pub use ops::*;
pub use optim::{AdamW, AdamWConfig, OptimError};
pub use rng::StreamRng;
pub use tensor::{set_precision, DiffError, Parameter, Precision, Tensor};
