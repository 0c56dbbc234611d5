//! Few-shot classification by feature-map reconstruction.
//!
//! A query image's spatial feature map is reconstructed from each class's
//! pooled support features with closed-form ridge regression; classes that
//! reconstruct the query well score high. Two scalars are learned, the log
//! ridge penalty `μ` and a score temperature `ε`, and the resulting
//! probabilities are fused with zero-shot vision-language scores.
//!
//! Modules, bottom-up:
//! - [`tensorcore`]: dense matrices, Cholesky solves, cosine similarity.
//! - [`projection`]: prototype pools and ridge reconstruction.
//! - [`classifier`]: probabilities, fusion, losses and their gradients.
//! - [`trainer`]: AdamW with cosine annealing over the two scalars.
//! - [`dataio`]: the `FPK1` feature-pack format and synthetic packs.
//! - [`evalharness`]: accuracy reports, baselines and shift sweeps.

pub mod classifier;
pub mod dataio;
pub mod evalharness;
pub mod projection;
pub mod tensorcore;
pub mod trainer;

pub use classifier::{FplParams, HyperParams, TextFeatureBank};
pub use dataio::{FeaturePack, SynthSpec};
pub use projection::{build_pool, ClassPrototypePool, FeatureMap, Reconstruction};
pub use tensorcore::Matrix;
pub use trainer::{Ablation, TrainState};
