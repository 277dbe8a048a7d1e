//! Desk-scale laboratory for RLHF fine-tuning of synthetic token policies and
//! max-margin recovery of the reward they were trained against.
//!
//! The pieces, bottom up:
//!
//! - [`world`]: the token MDP, feature function, and balanced corpus generator.
//! - [`oracle`]: the groundtruth toxicity scorer and the paired training reward.
//! - [`policy`]: tabular autoregressive softmax policies — sampling, greedy
//!   decoding, log-probabilities, maximum-likelihood pretraining, and KL
//!   estimates between policies.
//! - [`ppo`]: clipped-surrogate PPO with GAE advantages and a KL-shaped reward.
//! - [`irl`]: reward extraction, both the feature-expectation max-margin loop
//!   and paired-sample gradient descent on an asymmetric margin loss.
//! - [`eval`]: Pearson / Spearman / Kendall correlations and threshold
//!   classification against the groundtruth.
//! - [`harness`]: configuration, persistence, the end-to-end pipeline, and the
//!   reproduced studies (staged toxicity, per-epoch accuracy series,
//!   multi-seed variability).
//!
//! Everything is deterministic given the seeds in the configs. The `parallel`
//! feature (on by default) runs the embarrassingly parallel inner loops on
//! rayon; disabling it produces bit-identical results sequentially.

pub mod error;
pub mod eval;
pub mod exec;
pub mod harness;
pub mod irl;
pub mod oracle;
pub mod policy;
pub mod ppo;
pub mod seeding;
pub mod world;

pub use error::{Error, Result};
