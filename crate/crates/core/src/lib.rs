//! Meta-learning debiasing for relation-triplet predictors.
//!
//! Each epoch the training videos are split into a random support set and a
//! group of query sets, one per conditional-bias type, chosen so that their
//! triplet statistics diverge from the support set as much as possible. A
//! model is then optimized with a second-order meta-objective: a virtual
//! gradient step on the support set, evaluated on every query set.
//!
//! Module map:
//! - [`triplet`]: videos, triplets, vocabularies, annotation JSON.
//! - [`bias`]: the 15 bias types, conditional distributions, KL scores.
//! - [`splitter`]: support/query episode construction.
//! - [`meta`]: meta training, meta testing, meta-optimization, training loop.
//! - [`synth`]: synthetic biased task, toy predictor, ERM baseline.
//! - [`metrics`]: Recall@K, Mean Recall@K, bias gap.
//! - [`experiment`]: seeded meta-vs-ERM comparisons.

pub mod bias;
pub mod error;
pub mod experiment;
pub mod meta;
pub mod metrics;
pub mod par;
pub mod rng;
pub mod splitter;
pub mod synth;
pub mod triplet;

pub use error::{Error, Result};
