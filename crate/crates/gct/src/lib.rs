//! Graph convolutional transformer over hierarchical encounter records.
//!
//! The crate is organized bottom-up: a reverse-mode autodiff kernel
//! ([`numerics`]), a synthetic encounter generator ([`synthgen`]), per-encounter
//! graph structure ([`graph`]), a model zoo ([`models`]), supervised tasks and
//! metrics ([`tasks`]), and a training harness ([`harness`]). The `gct` binary
//! exposes the pipeline as subcommands ([`cli`]).

pub mod cli;
pub mod encounter;
pub mod error;
pub mod graph;
pub mod harness;
pub mod models;
pub mod numerics;
pub mod rng;
pub mod scalar;
pub mod synthgen;
pub mod tasks;

pub use error::{Error, Result};

/// Scalar type used by everything above the numerics kernel.
pub type Real = f64;
/// Concrete tensor for the runtime pipeline.
pub type Tensor = numerics::Tensor<Real>;
/// Concrete tape for the runtime pipeline.
pub type Tape = numerics::Tape<Real>;
