//! Zero-shot video moment retrieval from captions and text embeddings.
//!
//! Queries are rewritten into plainer wording, every frame is captioned and
//! compared with the rewrites, candidate spans are cut from the resulting
//! score curves, and each candidate is re-captioned as a clip and ranked.

pub mod backends;
pub mod captioner;
pub mod datasets;
pub mod debias;
pub mod error;
pub mod metrics;
pub mod model;
pub mod run;
pub mod scoring;
pub mod selection;
pub mod span_gen;

pub use error::{BackendError, Error, LineError, Result, ValidationError};
