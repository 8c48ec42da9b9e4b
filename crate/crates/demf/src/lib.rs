//! Deformable-attention multi-modal fusion of image features into 3D
//! point features, with a desk-scale synthetic detection pipeline.
//!
//! The crate is organized bottom-up:
//!
//! - [`diffcore`]: tensors with reverse-mode gradients, ops, AdamW, a
//!   finite-difference gradient checker, checkpoints, and a counter-based
//!   deterministic RNG.
//! - [`geometry`]: the nine-parameter camera projection and normalized
//!   reference points.
//! - [`attention`]: bilinear sampling, single- and multi-scale deformable
//!   attention, and multi-head self-attention.
//! - [`demf`]: the fusion layer stack with per-layer prediction heads and
//!   layer-averaged losses.
//! - [`toydet`]: synthetic scenes, toy encoders, training and evaluation.
//! - [`eval`]: 3D IoU, confusion matrices, average precision, and the
//!   box interchange format.
//! - [`cli`]: run configuration and the `demf` binary's commands.
//!
//! Numbers in this crate are small on purpose: default scenes have a few
//! thousand points and 64x64 images so every claim is checkable in
//! seconds. Training the mechanism at benchmark scale (full point-cloud
//! suites, hours of GPU time) is explicitly out of scope here, and
//! published benchmark numbers are not reproducible with this crate;
//! what is reproducible is the mechanism itself, its gradients, and its
//! relative effect on a task constructed to require fusion.

pub mod attention;
pub mod cli;
pub mod demf;
pub mod diffcore;
pub mod eval;
pub mod geometry;
pub mod toydet;
