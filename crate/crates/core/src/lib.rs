//! Continual-learning library and benchmark harness.
//!
//! Modules follow the experiment lifecycle: [`config`] describes a run,
//! [`datastream`] turns datasets into task sequences and streams, [`model`]
//! and [`algorithms`] train learners, [`buffer`] holds exemplars,
//! [`metrics`] and [`memorybudget`] score runs, and [`runner`] ties them
//! together behind the `clbench` CLI.

// NaN-rejecting `!(x > y)` checks and index loops are deliberate in numeric code.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod algorithms;
pub mod batch;
pub mod cli;
pub mod buffer;
pub mod config;
pub mod datastream;
pub mod error;
pub mod memorybudget;
pub mod metrics;
pub mod model;
pub mod runner;
pub mod util;

pub use batch::Batch;
pub use error::{Error, Result};
