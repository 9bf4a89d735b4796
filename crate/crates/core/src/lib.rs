//! Citation-rate regression from manuscript text.
//!
//! Documents are rendered to Markdown, byte-tokenized, and fed through a small
//! decoder-only transformer whose last hidden state drives a scalar linear
//! head. The target is the standardized log of the average monthly citation
//! rate. Training happens in two phases (head only, then head plus low-rank
//! adapters), and the evaluation modules cover the metric suite, temporal
//! holdout, ablations, scaling-law fits and gradient saliency.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod month;
pub mod saliency;
pub mod scaling;
pub mod targets;
pub mod textcodec;
pub mod training;

pub use error::{Error, Result};
pub use month::YearMonth;
