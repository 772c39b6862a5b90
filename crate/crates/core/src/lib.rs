//! Joint visual-semantic embeddings trained with hinge and temperature-scaled
//! contrastive losses on precomputed image and caption features.
//!
//! The pipeline has two stages. A headless network (one linear layer per
//! modality) is trained with the hardest-negative hinge loss; then a
//! two-layer projection head is attached to each branch and the whole network
//! is trained with a contrastive loss. Retrieval is scored with R@K in both
//! directions.
//!
//! - [`numerics`]: matrices, normalization, RNG, finite differences
//! - [`model`]: the embedding network and checkpoints
//! - [`losses`]: SH, MH, CSN, CMN_TILDE, CMN and MVN with gradients
//! - [`optim`]: Adam, SGD and learning-rate schedules
//! - [`data`]: feature files, paired datasets, batching, synthetic data
//! - [`eval`]: recall metrics, folds and run aggregation
//! - [`cli`]: the commands behind the `convse` binary

pub mod cli;
pub mod data;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod optim;

pub use data::{DatasetPaths, MiniBatch, PairedDataset, Split, SynthConfig};
pub use eval::RetrievalReport;
pub use losses::{LossConfig, LossKind};
pub use model::{EmbeddingNetwork, NetworkConfig};
pub use numerics::{Matrix, Rng};
