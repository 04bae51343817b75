//! Phrase-level interpretable fact verification.

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod decode;
pub mod decompose;
pub mod encoder;
pub mod error;
pub mod latent;
pub mod logic;
pub mod metrics;
pub mod pipeline;
pub mod premise;
pub mod synth;
pub mod text;

pub use error::{Error, Result};
