//! Annual yield forecasting from daily driver sequences.
//!
//! A GRU encoder with intra-year attention pooling produces one embedding per
//! county-year; cross-year attention over a look-back window of those
//! embeddings feeds the prediction head. At test time each county is adapted
//! with samples retrieved from counties whose global-model residuals move the
//! same way, after their labels are shifted by an extrapolated cross-year bias.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod data;
pub mod error;
pub mod numcore;
pub mod pipeline;
pub mod refinement;
pub mod retrieval;
pub mod training;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
