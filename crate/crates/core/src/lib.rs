//! Emotion-conditioned diffusion over FLAME-style expression sequences with a
//! contrastive multimodal emotion space.

pub mod attention;
pub mod binding;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod seqio;

pub use error::{Error, Result};
