//! Sentence-level pronunciation scoring from phonetic posteriorgrams.
//!
//! The pipeline: extract fixed-dimension GOP statistics from log
//! posteriorgrams, train a pairwise binary classifier on score-ordered
//! utterance pairs, and score new utterances by where they rank against the
//! training set (or against a balanced anchor set). Baselines (plain GOP
//! average, direct neural regression), evaluation metrics and a k-fold
//! cross-validation harness are included, plus a synthetic corpus generator
//! used as the verification oracle.

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod features;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod ranking;
pub mod synth;

pub use error::{Error, Result};
