//! Robust graph-contrastive collaborative filtering on a linear
//! graph-convolution backbone.
//!
//! The engine trains user/item embeddings over a symmetric-normalized
//! bipartite interaction graph with three coupled objectives: a pairwise
//! ranking loss, a multi-view contrastive loss whose augmented views are
//! confined to per-node decision-boundary perturbation budgets, and an
//! adversarial ranking loss on boundary-projected representations.
//!
//! Module map:
//! - [`dataset`]: ingestion, filtering, 8:1:1 splitting, negative-sampled
//!   batches.
//! - [`graph`]: CSR normalized adjacency and the propagation kernel.
//! - [`model`]: embeddings, layer stack, aggregation, scoring.
//! - [`diff`]: tape-based reverse-mode gradients for the fixed op set.
//! - [`augment`]: boundary perturbations, constrained random views,
//!   adversarial-contrastive directions, adversarial examples.
//! - [`losses`]: the five objective terms and their composition.
//! - [`trainer`]: the per-batch algorithm, Adam, early stopping,
//!   checkpoints.
//! - [`eval`]: full-ranking metrics, grouped decomposition, margin
//!   diagnostics.

pub mod augment;
pub mod dataset;
pub mod diff;
pub mod eval;
pub mod graph;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod trainer;
