//! Online-stage reward mathematics.
//!
//! For a pair `(i, j)` and the `k`-th score sampled for `i`, the Thurstone win
//! probability is
//!
//! ```text
//! p_k(i, j) = Φ((q_k(i) − μ(q(j))) / √(σ²(q(i)) + σ²(q(j)) + γ))
//! ```
//!
//! and the fidelity of that prediction against a pseudo-preference `p*` is
//! `√(p*·p_k) + √((1−p*)(1−p_k))`. An image's reward for sample `k` averages
//! the fidelity over every pairing it appears in; rewards are then
//! standardized within the image's `K` samples.

use serde::{Deserialize, Serialize};

use crate::error::{EvoqError, Result};
use crate::world::ImageId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Added to the Thurstone variance so point-mass groups stay finite.
    pub gamma: f64,
    pub std_floor: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            gamma: 1e-6,
            std_floor: 1e-8,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(EvoqError::config("reward.gamma", "must be > 0"));
        }
        if !(self.std_floor > 0.0 && self.std_floor.is_finite()) {
            return Err(EvoqError::config("reward.std_floor", "must be > 0"));
        }
        Ok(())
    }
}

/// Standard normal CDF, `Φ(z) = erfc(−z/√2) / 2`.
pub fn gaussian_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * std::f64::consts::FRAC_1_SQRT_2)
}

/// The `K` scores sampled for one image with their population moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreGroup {
    pub image_id: ImageId,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
}

impl ScoreGroup {
    pub fn new(image_id: ImageId, scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(EvoqError::EmptyBudget);
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let variance = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        Ok(Self {
            image_id,
            scores,
            mean,
            variance,
        })
    }

    pub fn k(&self) -> usize {
        self.scores.len()
    }
}

/// Win probability of a single sampled score of `i` against the whole score
/// group of `j`. Uses `i`'s variance and `j`'s mean and variance.
pub fn comparative_probability(
    q_k_i: f64,
    group_i: &ScoreGroup,
    group_j: &ScoreGroup,
    config: &RewardConfig,
) -> f64 {
    let denom = (group_i.variance + group_j.variance + config.gamma).sqrt();
    gaussian_cdf((q_k_i - group_j.mean) / denom)
}

/// A single fidelity term `√(p*·p) + √((1−p*)(1−p))`.
pub fn fidelity_term(p_star: f64, p: f64) -> f64 {
    (p_star * p).sqrt() + ((1.0 - p_star) * (1.0 - p)).sqrt()
}

/// Mean fidelity over `(p*, p_k)` terms, one term per pairing occurrence.
pub fn fidelity_reward(image_id: ImageId, terms: &[(f64, f64)]) -> Result<f64> {
    if terms.is_empty() {
        return Err(EvoqError::ExcludedImage(image_id));
    }
    Ok(terms
        .iter()
        .map(|&(ps, p)| fidelity_term(ps, p))
        .sum::<f64>()
        / terms.len() as f64)
}

/// Group-relative advantages `(r_k − mean) / max(std, floor)`, population std.
/// A constant group returns exact zeros.
pub fn advantages(rewards: &[f64], config: &RewardConfig) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(EvoqError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(config.std_floor);
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Per-sample fidelity terms a labelled pair contributes to both images:
/// `i` is scored against `p*(i, j)`, and `j` against the swapped label
/// `1 − p*` with the roles in the Thurstone probability exchanged.
pub fn swap_rewards(
    p_star: f64,
    group_i: &ScoreGroup,
    group_j: &ScoreGroup,
    config: &RewardConfig,
) -> (Vec<f64>, Vec<f64>) {
    (
        pair_terms(p_star, group_i, group_j, config),
        pair_terms(1.0 - p_star, group_j, group_i, config),
    )
}

/// The `i` side of [`swap_rewards`]: one fidelity term per sample of `i`.
pub fn pair_terms(
    p_star: f64,
    group_i: &ScoreGroup,
    group_j: &ScoreGroup,
    config: &RewardConfig,
) -> Vec<f64> {
    group_i
        .scores
        .iter()
        .map(|&q| fidelity_term(p_star, comparative_probability(q, group_i, group_j, config)))
        .collect()
}

/// Running per-sample sums of fidelity terms for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardAccumulator {
    pub sums: Vec<f64>,
    pub count: usize,
    pub partners: Vec<ImageId>,
}

impl RewardAccumulator {
    pub fn new(k: usize) -> Self {
        Self {
            sums: vec![0.0; k],
            count: 0,
            partners: Vec::new(),
        }
    }

    pub fn add(&mut self, partner: ImageId, terms: &[f64]) {
        debug_assert_eq!(terms.len(), self.sums.len());
        for (s, t) in self.sums.iter_mut().zip(terms) {
            *s += t;
        }
        self.count += 1;
        self.partners.push(partner);
    }

    pub fn rewards(&self, image_id: ImageId) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(EvoqError::ExcludedImage(image_id));
        }
        Ok(self.sums.iter().map(|s| s / self.count as f64).collect())
    }
}
