//! Accompaniment-conditioned rap vocal generation: semantic tokenization,
//! a lyrics-to-semantic language model, a flow-matching mel decoder, dataset
//! curation and evaluation metrics.

pub mod audio;
pub mod bench;
pub mod cfm;
pub mod cli;
pub mod error;
pub mod featurization;
pub mod formats;
pub mod lm;
pub mod metrics;
pub mod nn;
pub mod rapbank;
pub mod refenc;
pub mod spectral;

pub use error::{Error, Result};
