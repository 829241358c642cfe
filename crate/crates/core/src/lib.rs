//! Group re-identification over precomputed person features.
//!
//! Pipeline: [`feature_store`] ingests per-person features and depths,
//! [`graph`] turns each group view into a depth-ordered context graph,
//! [`random_walk`] picks the probe subgroup that best agrees with a gallery
//! group, [`matching`] scores graph pairs with inter-graph attention,
//! [`training`] fits the matching weights with a circle loss, and [`eval`]
//! generates synthetic scenarios and reports CMC accuracies.

#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod eval;
pub mod feature_store;
pub mod graph;
pub mod linalg;
pub mod matching;
pub mod pipeline;
pub mod random_walk;
pub mod training;

pub use feature_store::{load_dataset, validate_dataset, DatasetManifest, GroupSample, PersonDescriptor};
pub use graph::{build_graph, enumerate_candidates, ContextGraph, Node};
pub use matching::{GraphEmbedding, MatchConfig, MatchParams};
pub use random_walk::{AffinityMatrix, AffinityScorer, ScorerConfig, WalkState};
