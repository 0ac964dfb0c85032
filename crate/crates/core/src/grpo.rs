//! Clipped, KL-regularized group-relative policy optimization for the
//! built-in softmax policy.
//!
//! ```text
//! loss = −1/(G·K) Σ_groups Σ_k [ min(ρ·a, clip(ρ, 1−ε, 1+ε)·a) − β·(r − ln r − 1) ]
//! ρ = π_θ(o_k) / π_old(o_k),   r = π_ref(o_k) / π_θ(o_k)
//! ```
//!
//! Gradients are closed form. With `z = W·f + b` and the sampled bin `o`,
//! `∂ ln π_θ(o) / ∂z = e_o − π_θ`; the surrogate contributes `a·ρ` times that
//! when its unclipped branch is active, and the KL estimator contributes
//! `(1 − r)` times it.

use serde::{Deserialize, Serialize};

use crate::error::{EvoqError, Result};
use crate::policy::PolicyParams;
use crate::world::ImageId;

/// exp() overflows just above 709.78; anything past this is a runaway policy.
pub const MAX_LOG_RATIO: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub clip_epsilon: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub moment_decays: (f64, f64),
    pub moment_epsilon: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            beta: 0.05,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            moment_decays: (0.9, 0.999),
            moment_epsilon: 1e-8,
        }
    }
}

impl GrpoConfig {
    /// Learning rate used with external, full-size model peers.
    pub const EXTERNAL_LEARNING_RATE: f64 = 3e-7;

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(EvoqError::config("grpo.clip_epsilon", "must lie in (0, 1)"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(EvoqError::config("grpo.beta", "must be >= 0"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(EvoqError::config("grpo.learning_rate", "must be > 0"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(EvoqError::config("grpo.weight_decay", "must be >= 0"));
        }
        let (b1, b2) = self.moment_decays;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(EvoqError::config(
                "grpo.moment_decays",
                "both decays must lie in [0, 1)",
            ));
        }
        if self.moment_epsilon.is_nan() || self.moment_epsilon <= 0.0 {
            return Err(EvoqError::config("grpo.moment_epsilon", "must be > 0"));
        }
        Ok(())
    }
}

pub fn importance_ratio(logp_new: f64, logp_old: f64) -> Result<f64> {
    let diff = logp_new - logp_old;
    if !diff.is_finite() || diff > MAX_LOG_RATIO {
        return Err(EvoqError::DivergedPolicy(diff));
    }
    Ok(diff.exp())
}

pub fn clip(ratio: f64, epsilon: f64) -> f64 {
    ratio.clamp(1.0 - epsilon, 1.0 + epsilon)
}

pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_epsilon: f64) -> f64 {
    (ratio * advantage).min(clip(ratio, clip_epsilon) * advantage)
}

/// `r − ln r − 1` with `r = p_ref / p_theta`, evaluated on one sampled action.
pub fn kl_approx(p_ref: f64, p_theta: f64) -> Result<f64> {
    if !(p_ref > 0.0 && p_theta > 0.0) {
        return Err(EvoqError::DegenerateSupport { p_ref, p_theta });
    }
    Ok(kl_from_log_ratio(p_ref.ln() - p_theta.ln()))
}

fn kl_from_log_ratio(log_r: f64) -> f64 {
    log_r.exp() - log_r - 1.0
}

/// One sampled scoring trajectory with what the loss needs to re-evaluate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub image_id: ImageId,
    pub bin: usize,
    pub features: Vec<f64>,
    pub advantage: f64,
    pub logp_old: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Mean clipped surrogate.
    pub surrogate_term: f64,
    /// Mean KL estimate.
    pub kl_term: f64,
    /// `−(surrogate − β·kl)`.
    pub total: f64,
}

fn check_groups(batch: &[Vec<TrajectoryRecord>]) -> Result<usize> {
    let k = batch.first().map(Vec::len).unwrap_or(0);
    if k == 0 {
        return Err(EvoqError::BatchShape {
            group: 0,
            expected: 1,
            actual: 0,
        });
    }
    for (g, group) in batch.iter().enumerate() {
        if group.len() != k {
            return Err(EvoqError::BatchShape {
                group: g,
                expected: k,
                actual: group.len(),
            });
        }
    }
    Ok(k)
}

struct RecordEval {
    log_probs: Vec<f64>,
    ratio: f64,
    log_r_ref: f64,
}

fn evaluate(
    params: &PolicyParams,
    reference: &PolicyParams,
    rec: &TrajectoryRecord,
) -> Result<RecordEval> {
    if rec.bin >= params.n_bins() {
        return Err(EvoqError::InvalidBin {
            bin: rec.bin,
            n_bins: params.n_bins(),
        });
    }
    let log_probs = params.log_probs(&rec.features)?;
    let logp = log_probs[rec.bin];
    let ratio = importance_ratio(logp, rec.logp_old)?;
    let log_r_ref = reference.log_probs(&rec.features)?[rec.bin] - logp;
    Ok(RecordEval {
        log_probs,
        ratio,
        log_r_ref,
    })
}

/// Loss over `G` image groups of `K` trajectories each. `params` is `π_θ`,
/// `reference` is `π_ref`; `π_old` enters through each record's `logp_old`.
pub fn grpo_loss(
    params: &PolicyParams,
    reference: &PolicyParams,
    batch: &[Vec<TrajectoryRecord>],
    config: &GrpoConfig,
) -> Result<LossBreakdown> {
    let k = check_groups(batch)?;
    let n = (batch.len() * k) as f64;
    let mut surrogate = 0.0;
    let mut kl = 0.0;
    for rec in batch.iter().flatten() {
        let ev = evaluate(params, reference, rec)?;
        surrogate += clipped_surrogate(ev.ratio, rec.advantage, config.clip_epsilon);
        kl += kl_from_log_ratio(ev.log_r_ref);
    }
    let (surrogate, kl) = (surrogate / n, kl / n);
    Ok(LossBreakdown {
        surrogate_term: surrogate,
        kl_term: kl,
        total: -(surrogate - config.beta * kl),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGradient {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl PolicyGradient {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Self {
            weights: vec![0.0; params.weights.len()],
            biases: vec![0.0; params.biases.len()],
        }
    }

    pub fn norm(&self) -> f64 {
        self.weights
            .iter()
            .chain(&self.biases)
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.biases)
            .all(|g| g.is_finite())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.weights.iter().chain(&self.biases).copied().collect()
    }
}

/// Exact gradient of [`grpo_loss`] with respect to `params`.
///
/// Where `ρ·a` equals its clipped counterpart the unclipped branch is used.
/// Records are reduced in batch order so the result is reproducible.
pub fn loss_gradient(
    params: &PolicyParams,
    reference: &PolicyParams,
    batch: &[Vec<TrajectoryRecord>],
    config: &GrpoConfig,
) -> Result<PolicyGradient> {
    let k = check_groups(batch)?;
    let n = (batch.len() * k) as f64;
    let dim = params.dim;
    let mut grad = PolicyGradient::zeros_like(params);
    for rec in batch.iter().flatten() {
        let ev = evaluate(params, reference, rec)?;
        let a = rec.advantage;
        let unclipped = ev.ratio * a <= clip(ev.ratio, config.clip_epsilon) * a;
        let surrogate_coef = if unclipped { a * ev.ratio } else { 0.0 };
        let r = ev.log_r_ref.exp();
        // d(loss)/d(ln π_θ(o))
        let coef = -(surrogate_coef - config.beta * (1.0 - r)) / n;
        if coef == 0.0 {
            continue;
        }
        for (b, lp) in ev.log_probs.iter().enumerate() {
            let indicator = if b == rec.bin { 1.0 } else { 0.0 };
            let dz = coef * (indicator - lp.exp());
            grad.biases[b] += dz;
            let row = &mut grad.weights[b * dim..(b + 1) * dim];
            for (g, f) in row.iter_mut().zip(&rec.features) {
                *g += dz * f;
            }
        }
    }
    Ok(grad)
}

/// Moment accumulators for the decoupled-weight-decay adaptive-moment update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: usize,
    /// Steps over which the learning rate decays linearly to zero; `None`
    /// keeps it constant.
    pub total_steps: Option<usize>,
}

impl OptimizerState {
    pub fn new(params: &PolicyParams, total_steps: Option<usize>) -> Self {
        let n = params.n_params();
        Self {
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
            total_steps,
        }
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self, config: &GrpoConfig) -> f64 {
        match self.total_steps {
            Some(total) if total > 0 => {
                config.learning_rate * (1.0 - self.step as f64 / total as f64).max(0.0)
            }
            _ => config.learning_rate,
        }
    }
}

/// Applies one AdamW update in place and returns the learning rate used.
///
/// A non-finite gradient aborts before anything is modified.
pub fn optimizer_step(
    params: &mut PolicyParams,
    gradient: &PolicyGradient,
    state: &mut OptimizerState,
    config: &GrpoConfig,
) -> Result<f64> {
    if !gradient.is_finite() {
        return Err(EvoqError::Numerical("non-finite gradient".into()));
    }
    let lr = state.current_lr(config);
    let (b1, b2) = config.moment_decays;
    state.step += 1;
    let bias1 = 1.0 - b1.powi(state.step as i32);
    let bias2 = 1.0 - b2.powi(state.step as i32);

    let mut flat = params.flatten();
    let grads = gradient.flatten();
    for (idx, (theta, g)) in flat.iter_mut().zip(&grads).enumerate() {
        let m = &mut state.first_moment[idx];
        let v = &mut state.second_moment[idx];
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *theta -= lr * config.weight_decay * *theta;
        *theta -= lr * m_hat / (v_hat.sqrt() + config.moment_epsilon);
    }
    params.set_flat(&flat);
    if !params.is_finite() {
        return Err(EvoqError::Numerical("parameters became non-finite".into()));
    }
    Ok(lr)
}
