//! Graph script induction from observed task-execution step sequences.
//!
//! The pipeline grounds noisy step annotations or narration onto a per-task
//! step library ([`corpus`], [`grounding`]), learns a smoothed path model
//! ([`pathmodel`]), decodes library-constrained step paths ([`decoder`]) and
//! folds them into a pruned graph with sequential, optional and
//! interchangeable relations ([`graphgen`]). [`contrastive`] supplies the
//! negative paths and path-level losses, [`evalharness`] the next-step and
//! completion metrics, and [`pipeline`] wires the stages to files.

pub mod contrastive;
pub mod corpus;
pub mod decoder;
pub mod edit;
pub mod error;
pub mod evalharness;
pub mod graphgen;
pub mod grounding;
pub mod pathmodel;
pub mod pipeline;

pub use error::{Error, Result};
