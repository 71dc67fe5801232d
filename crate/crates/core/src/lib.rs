//! Discovering influential text features ("text treatments") with a
//! regularized convolutional network over per-token embeddings.
//!
//! The pipeline: [`corpus`] ingestion and synthesis, the [`model`] forward
//! pass, the composite [`loss`] with hand-written gradients, [`train`]ing with
//! Adam and cross-validated tuning, filter [`interpret`]ation, treatment
//! [`effects`] with bootstrap intervals, and the n-gram [`rlr`] benchmark.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod effects;
pub mod hexfloat;
pub mod interpret;
pub mod loss;
pub mod model;
pub mod rlr;
pub mod stats;
pub mod train;

pub use corpus::{Corpus, Sample};
pub use loss::LossWeights;
pub use model::ModelParams;
pub use train::TrainConfig;
