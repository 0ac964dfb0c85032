//! Self-training pairwise ranking engine.
//!
//! The engine alternates two stages per round. Offline, the current policy
//! votes `K` times on every sampled image pair and the majority becomes a
//! pseudo-preference in `{0, 0.5, 1}`. Online, the policy samples `K` scores
//! per image, turns them into Thurstone win probabilities against each
//! partner, scores those against the pseudo-preferences with a fidelity
//! reward, and takes clipped, KL-regularized group-relative policy steps.
//!
//! Everything runs on a synthetic perceptual world ([`world`]) with a
//! built-in softmax scoring policy ([`policy`]) whose log-probabilities and
//! gradients are exact. External scorers can stand in for the built-in
//! policy through the line-oriented protocol in [`bridge`].

pub mod ablation;
pub mod artifacts;
pub mod bridge;
pub mod config;
pub mod error;
pub mod eval;
pub mod evolution;
pub mod grpo;
pub mod policy;
pub mod reward;
pub mod seed;
pub mod voting;
pub mod world;

pub use config::RunConfig;
pub use error::{EvoqError, Result};
pub use evolution::{run_evolution, EvolutionConfig, EvolutionMode, RoundArtifacts};
pub use grpo::GrpoConfig;
pub use policy::{PolicyParams, PolicySnapshot, QualityScale, ScoreSample};
pub use reward::RewardConfig;
pub use seed::SeedDerivation;
pub use voting::{PseudoLabel, VoteTally};
pub use world::{Corpus, ImageId, LatentImage, PairMode, PairSet, WorldConfig};
