//! Fuzzing-driven virtual patching.
//!
//! The pipeline turns a parser into labeled training data with a
//! coverage-guided genetic fuzzer, extracts byte-sequence and token-count
//! features, trains a two-path convolutional/recurrent classifier and scores
//! unseen inputs with it. The [`metrics`] module holds the evaluation
//! protocols, including the old-version/new-version ahead-of-threat run.

pub mod dataset;
pub mod features;
pub mod fuzzer;
pub mod hash;
pub mod metrics;
pub mod neuralnet;
pub mod par;
pub mod target;

pub use dataset::{BinaryLabel, CorpusStore, SplitDataset};
pub use features::{FeatureConfig, FeatureVector, TokenList};
pub use fuzzer::{CampaignConfig, TestCase, Token};
pub use metrics::{ConfusionMatrix, EvalReport};
pub use neuralnet::{Model, TrainConfig};
pub use target::{ExecutionOutcome, Label, TargetSpec};
