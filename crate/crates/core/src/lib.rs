//! Data-side pipeline for coverage-oriented federated instruction augmentation.
//!
//! Every stage works on precomputed, unit-normalized instruction embeddings:
//!
//! - [`embed_store`]: ingestion, validation and the `FDCA` binary format.
//! - [`geometry`]: cosine similarity, the coverage function and facility-location gains.
//! - [`clustering`]: seeded spherical k-means producing per-client candidate centers.
//! - [`selection`]: server-side swap search over all uploaded centers, plus beam and
//!   exhaustive oracles.
//! - [`augment`]: threshold-filtered dense retrieval and the baseline strategies.
//! - [`partition`]: Dirichlet, iid and distinct-cluster client partitioning.
//! - [`metrics`]: cross-client domain coverage, ICACS, RUAI and communication accounting.
//! - [`fedsim`]: deterministic protocol simulation and strategy comparison.
//! - [`selfcheck`]: the bundled property suite.
//! - [`synth`]: planted-cluster instances for experiments and tests.

pub mod augment;
pub mod clustering;
pub mod embed_store;
pub mod fedsim;
pub mod geometry;
pub mod metrics;
pub mod partition;
pub mod seed;
pub mod selection;
pub mod selfcheck;
pub mod synth;

pub use augment::{Hit, RetrievalResult, Strategy};
pub use clustering::CandidateCenters;
pub use embed_store::{EmbeddingStore, InstructionRecord, StoreError};
pub use fedsim::{ExperimentConfig, ExperimentLog, ProtocolMessage};
pub use geometry::{CoverageValue, SimilarityMode};
pub use metrics::MetricsReport;
pub use partition::{PartitionMode, PartitionPlan};
pub use selection::{CenterSelection, SelectionProblem, SelectionReference};
