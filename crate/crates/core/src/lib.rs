//! Generative drug-target-interaction triplet discovery: corpus tooling,
//! fuzzy-match filtration, a feature-fusion encoder-decoder, evaluation
//! metrics and semi-supervised pseudo-labeling.

pub mod corpus;
pub mod datagen;
pub mod error;
pub mod fuzzymatch;
pub mod bpe;
pub mod linearize;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod semisup;
pub mod stats;

pub use corpus::{Document, DtiTriplet, LabeledExample, Lexicon, Lexicons};
pub use error::{Error, Result};
