//! Toolkit for composing a pool of LoRA adapter updates for tasks the pool
//! was never trained on.
//!
//! The pieces are deliberately independent: you can retrieve candidate
//! adapters for a task, search mixing weights against any loss you can
//! evaluate, merge the weighted updates with one of several operators
//! (including an interference-controlled residual composition), sparsify
//! deltas with seeded Bernoulli masks, aggregate answers across embedding
//! views by support reliability, and audit two prediction files against each
//! other with paired resampling statistics.
//!
//! Everything that takes a seed is reproducible bit-for-bit across runs and
//! platforms. Binary tensor data lives in a small self-describing container
//! (see [`container`]); the remaining interchange formats are JSON or JSONL.
//!
//! The `examples/` directory has one runnable walkthrough per capability;
//! a thin `lorapool` binary exposes the same operations as subcommands for
//! shell pipelines.

pub mod agg;
pub mod cli;
pub mod container;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod merge;
pub mod pipeline;
pub mod retrieval;
pub mod rng;
pub mod sdp;
pub mod search;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
