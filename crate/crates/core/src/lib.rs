//! Knowledge-augmented clustering refinement.
//!
//! Confronts an expert labeling with an automated clustering, recommends
//! splits and merges of the expert labels with confidences, justifies each
//! recommendation with precision/coverage rules and runs the iterative
//! expert-in-the-loop refinement of a rule knowledge base.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix it to `f64`, which is what the CLI and service use.

pub mod clusterer;
pub mod contingency;
pub mod dataset;
pub mod explain;
pub mod matrix;
pub mod metrics;
pub mod recommend;
pub mod rulebase;
pub mod scalar;
pub mod scenarios;
pub mod session;
pub mod store;

pub use clusterer::{kmeans, KMeansConfig};
pub use contingency::{AxisMode, ContingencyMatrix};
pub use dataset::{BlobSpec, Labeling};
pub use matrix::Matrix;
pub use explain::{InduceConfig, SearchStrategy};
pub use metrics::{AgreementScores, LinkageKind};
pub use recommend::RecommendParams;
pub use scalar::Scalar;

pub type Dataset = dataset::LabeledDataset<f64>;
pub type Dataset32 = dataset::LabeledDataset<f32>;
pub type SplitMatrix = contingency::SplitMatrix<f64>;
pub type MergeMatrix = contingency::MergeMatrix<f64>;
pub type Recommendation = recommend::Recommendation<f64>;
pub type SplitRecommendation = recommend::SplitRecommendation<f64>;
pub type MergeRecommendation = recommend::MergeRecommendation<f64>;
pub type ExplanationRule = explain::ExplanationRule<f64>;
pub type KnowledgeBase = rulebase::KnowledgeBase<f64>;
pub type Session = session::Session<f64>;
