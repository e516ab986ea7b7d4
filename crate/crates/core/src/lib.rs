//! Few-shot keyword spotting with a text-aware adapter.
//!
//! A compact ECAPA-style acoustic encoder maps mel features to unit-norm
//! embeddings in the space of a character-level text encoder. Adapting to a
//! new keyword fine-tunes a small subset of the encoder (BN affine
//! parameters, one SE module, and learnable activations whose mixture
//! weights are predicted from the keyword's text embedding) and scores
//! utterances against the fixed text embedding.

pub mod adaptation;
pub mod checkpoint;
pub mod conditioning;
pub mod data;
pub mod encoder;
pub mod error;
#[cfg(feature = "wav")]
pub mod frontend;
pub mod head;
pub mod layers;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
