//! Prompt-guided image captioning: a from-scratch autodiff tape, a
//! MobileNet-style encoder, a feature-injected Transformer decoder, a content
//! prompt module, fusion-loss training and reference captioning metrics.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod params;
pub mod pipeline;
pub mod prompt;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
