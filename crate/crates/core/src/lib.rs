//! Joint word recognition and word-level timestamp prediction with a small
//! autoregressive decoder, on synthetic speech-like data.
//!
//! The pieces:
//! - [`codec`]: vocabulary and the interleaved `word <|t_k|>` sequence format
//! - [`synth`]: synthetic utterances and length augmentation
//! - [`model`]: the decoder, its backward pass and checkpoints
//! - [`training`]: cross-entropy plus timestamp embedding regularization,
//!   reduced teacher forcing and the training loop
//! - [`eval`]: WER, AAS, MAL and the error-propagation probe
//! - [`experiment`]: the command implementations behind the CLI

pub mod codec;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod manifest;
pub mod model;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
