//! Document-level Urdu sentiment classification, built from scratch.
//!
//! The crate trains and evaluates four architectures over CSV corpora:
//! a BiLSTM, a text CNN, a CNN-BiLSTM, and the hybrid `bilstm-slmfcnn`
//! (BiLSTM feeding a single-layer multi-filter CNN with max-over-time
//! pooling). Everything from the tensor arithmetic to backpropagation
//! through time is implemented here; the only external numeric dependency
//! is the seeded ChaCha generator.

pub mod cli;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod parallel;
pub mod tensor;
pub mod textproc;
pub mod train;

pub use error::{Error, Result};
