//! Answer scoring for visual commonsense questions with an imagined or
//! retrieved image: a frozen text backbone with two adapter sets, a
//! language-model score, an attention-pooled image-text matching score,
//! margin ranking training, dataset forging, and ensemble inference.

pub mod analysis;
pub mod backend;
pub mod config;
pub mod error;
pub mod forge;
pub mod imagination;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod rng;
pub mod scoring;
pub mod toy;
pub mod training;
pub mod types;

pub use error::{Error, Result};
