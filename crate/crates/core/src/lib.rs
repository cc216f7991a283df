//! Cross-speaker emotion transfer for a Tacotron-style acoustic model.
//!
//! A speaker disentangling module extracts an emotion embedding kept
//! orthogonal to a speaker embedding; a prosody compensation encoder with
//! global-context blocks restores emotion cues from ASR intermediate
//! features; both condition the text encoder, while a speaker look-up table
//! sets the output timbre.

pub mod acoustic;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod nn;
pub mod optim;
pub mod pcm;
pub mod pipeline;
pub mod sdm;

pub use error::{Error, Result};
