//! Compact domain-adaptive pretraining toolkit.
//!
//! The pipeline compacts an unlabeled corpus into summaries and a list of
//! frequent domain keywords, pretrains an encoder with keyword-only
//! whole-word masking and fine-tunes it for classification.

pub mod corpus;
pub mod error;
pub mod keyword_extraction;
pub mod keyword_filter;
pub mod masking;
pub mod pipeline;
pub mod reporting;
pub mod summarizer;
pub mod synthetic;
pub mod tokenizer;
pub mod training;

pub use error::{Error, FailurePolicy, Result};
