//! Desk-scale laboratory for studying in-context rule inference under
//! conflicting demonstrations.
//!
//! A small instrumented decoder-only transformer is meta-trained on synthetic
//! rule-inference episodes, corrupted one demonstration at a time, and then
//! analyzed with linear probes, logit lens, per-head allocation/sensitivity
//! scoring, and targeted head ablation.
//!
//! Module map:
//!
//! - [`numcore`] — dense tensors with reverse-mode autodiff and a seeded RNG
//! - [`tasks`] — episode sampling, corruption, and tokenization
//! - [`model`] — the instrumented transformer plus scripted oracle models
//! - [`train`] — meta-training loop and clean-accuracy evaluation
//! - [`harness`] — paired clean/corrupted corruption sweeps and statistics
//! - [`probes`] — layer-wise linear probes for rule presence
//! - [`introspect`] — logit lens and head scoring (allocation, sensitivity,
//!   vulnerability, susceptibility, correlation)
//! - [`ablate`] — masked-head studies, cross-task overlap, synergy test
//! - [`textio`] — prompt rendering and answer extraction for external models

pub mod ablate;
pub mod harness;
pub mod introspect;
pub mod model;
pub mod numcore;
pub mod probes;
pub mod tasks;
pub mod textio;
pub mod train;


pub use numcore::{Rng, Tensor};

