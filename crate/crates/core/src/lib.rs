//! Speaker-attribute perturbation for asynchronous voice anonymization.
//!
//! A Conformer generator adds a perturbation to STFT magnitudes so that a
//! frozen speaker encoder no longer recognises the speaker, while log
//! filterbank features stay close to the original. Training uses an
//! any-to-any objective: each mini-batch pulls its anonymized embeddings
//! toward the batch mean instead of toward any real speaker.
//!
//! Modules:
//! - [`signal`]: WAV I/O, STFT/iSTFT, log mel filterbank
//! - [`encoder`]: speaker embedding network and cosine scoring
//! - [`losses`]: perceptual, angular and batch-mean objectives
//! - [`generator`]: Conformer perturbation generator and the anonymizer
//! - [`attacks`]: FGSM / I-FGSM / MI-FGSM waveform baselines
//! - [`training`]: batching, learning-rate schedule, training loop
//! - [`evaluation`]: trials, EER, robustness transforms

pub mod attacks;
pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod losses;
mod nn;
pub mod signal;
pub mod training;

pub use error::{Error, Result};
