//! Weakly-supervised out-of-distribution detection over precomputed embedding
//! vectors by topological structure learning.
//!
//! The pipeline works on a pool of labeled in-distribution (ID) embeddings plus
//! a large unlabeled ID/OOD mixture:
//!
//! 1. [`metric`] estimates a regularized Mahalanobis metric from the labeled
//!    rows and exposes the class centers.
//! 2. [`mining`] ranks every pool point's neighbors under that metric and
//!    mines close (reciprocal-KNN) positive pairs, loose (one-directional)
//!    positive pairs, labeled intra-class pairs, and rank-complement
//!    negative pairs.
//! 3. [`projector`] trains a linear projector with four hinge losses over the
//!    mined pairs using seeded SGD and analytic gradients.
//! 4. [`scoring`] scores test points by negated projected distance to the
//!    nearest class center and evaluates AUROC, FPR95, detection error, and
//!    AUPR-In/Out.
//!
//! [`data`] holds the embedding-set container, its binary file format, and a
//! seeded Gaussian-mixture generator for desk-scale benchmarks.

pub mod data;
pub mod metric;
pub mod mining;
pub mod projector;
pub mod scoring;

pub use data::{generate_synthetic, load_embeddings, save_embeddings, EmbeddingSet, Role, SyntheticCounts, SyntheticSpec};
pub use metric::{class_centers, estimate_metric, ClassCenters, MahalanobisMetric, Shrinkage};
pub use mining::{build_neighbor_table, NeighborTable, Pair, PairInventory};
pub use projector::{train, InitScheme, LossBreakdown, Projector, Quotas, TrainConfig};
pub use scoring::MetricsReport;
