//! Multi-source prompt transfer with transferability-scored, gradient-aligned
//! ensemble weights.
//!
//! Source prompts are combined into a target prompt `P_T = Σ α_i P_i`. The
//! weights `α` are chosen on the simplex by minimizing `−H(α) + λ·L_align(α)`:
//! the H-score rewards discriminative fused features, the alignment term
//! penalizes sources whose target-loss gradients disagree with the consensus.
//!
//! Modules, bottom up:
//! - [`linalg`]: dense matrices, covariances, ridge Cholesky inverses
//! - [`ensemble`]: simplex weights, fusion, simplex projection
//! - [`transferability`]: H-score and its analytic gradient
//! - [`alignment`]: normalized gradients and the alignment loss
//! - [`optimizer`]: projected gradient descent with restarts and sweeps
//! - [`bundle`]: the HGPB file format
//! - [`harness`]: a toy prompted encoder and synthetic tasks
//! - [`cli`]: the `hgprompt` command line

pub mod alignment;
pub mod bundle;
pub mod cli;
pub mod ensemble;
pub mod error;
pub mod exec;
pub mod format;
pub mod gradcheck;
pub mod harness;
pub mod linalg;
pub mod optimizer;
pub mod transferability;

pub use alignment::{NormMode, NormalizedGradientSet, PromptGradient};
pub use bundle::{read_bundle, validate_bundle, write_bundle, PromptBundle};
pub use ensemble::{PromptTensor, SimplexWeights};
pub use error::{Error, Result};
pub use exec::Exec;
pub use linalg::Matrix;
pub use optimizer::{optimize_weights, sweep_lambda, OptimizationTrace, OptimizerConfig};
pub use transferability::{h_score, CrossCovarianceCache, LabeledFeatures};
