//! Daily encoder, intra-year attention pooling, yearly embeddings with
//! cross-year attention, and the global GRU regressor.

mod checkpoint;
mod global;
mod gru;
mod lyra;
mod mlp;

pub use checkpoint::{load_gru, load_lyra, save_gru, save_lyra};
pub use global::{GruDims, GruParams};
pub use gru::{time_major, Gru};
pub use lyra::{
    cross_year_attention, lookback_sample, EmbedRequest, LookbackContext, LyraBatch, LyraDims, LyraForward,
    LyraParams, LyraSample, SampleOutput, SampleRequest, Variant, YearInput, YearlyEmbedding,
};
pub use mlp::Mlp;

#[cfg(test)]
mod tests;
