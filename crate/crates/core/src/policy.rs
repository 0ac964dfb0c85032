//! Scoring policies.
//!
//! The built-in policy is a linear softmax over a discretized score scale:
//! `logits = W·features + b`, one bin per representable score. Because the
//! action space is a small categorical, every log-probability (and later every
//! gradient) is exact.
//!
//! [`PolicyBackend`] is the surface the rest of the engine talks to; the
//! built-in policy and the bridge adapter both implement it.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{EvoqError, Result};
use crate::seed::{rng_from_seed, StreamRng};
use crate::world::{FeatureEmbedding, LatentImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityScale {
    pub min_score: f64,
    pub max_score: f64,
    pub n_bins: usize,
}

impl Default for QualityScale {
    fn default() -> Self {
        Self {
            min_score: 1.0,
            max_score: 5.0,
            n_bins: 17,
        }
    }
}

impl QualityScale {
    pub fn with_bins(n_bins: usize) -> Self {
        Self {
            n_bins,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bins < 2 {
            return Err(EvoqError::config("policy.n_bins", "must be at least 2"));
        }
        if !self.min_score.is_finite()
            || !self.max_score.is_finite()
            || self.min_score >= self.max_score
        {
            return Err(EvoqError::config(
                "policy.scale",
                "min_score must be below max_score",
            ));
        }
        Ok(())
    }

    pub fn bin_width(&self) -> f64 {
        (self.max_score - self.min_score) / (self.n_bins - 1) as f64
    }

    /// Bin center, rounded to two decimals like the emitted scores.
    pub fn center(&self, bin: usize) -> f64 {
        round2(self.min_score + self.bin_width() * bin as f64)
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_bins).map(|b| self.center(b)).collect()
    }

    /// Nearest bin to a (possibly off-grid) score.
    pub fn nearest_bin(&self, score: f64) -> usize {
        let pos = ((score - self.min_score) / self.bin_width()).round();
        pos.clamp(0.0, (self.n_bins - 1) as f64) as usize
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// How fresh policy parameters are initialised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyInit {
    /// Weights iid `N(0, weight_std²)`, biases zero.
    Random { weight_std: f64 },
    /// A weakly competent starting scorer: a soft nearest-prototype rule with
    /// logits `−(sharpness/2)·‖e(center_b) − x‖²` up to a per-image constant,
    /// where `e` is the noise-free feature embedding. Weight rows then get
    /// iid `N(0, distortion_std²)` noise.
    Prior { sharpness: f64, distortion_std: f64 },
}

impl Default for PolicyInit {
    fn default() -> Self {
        PolicyInit::Prior {
            sharpness: 1.0,
            distortion_std: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub scale: QualityScale,
    pub dim: usize,
    /// Row-major `n_bins × dim`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(scale: QualityScale, dim: usize) -> Self {
        Self {
            scale,
            dim,
            weights: vec![0.0; scale.n_bins * dim],
            biases: vec![0.0; scale.n_bins],
        }
    }

    pub fn init(
        scale: QualityScale,
        embedding: &FeatureEmbedding,
        init: &PolicyInit,
        seed: u64,
    ) -> Result<Self> {
        let dim = embedding.dim;
        scale.validate()?;
        let mut params = Self::zeros(scale, dim);
        let mut rng = rng_from_seed(seed);
        match *init {
            PolicyInit::Random { weight_std } => {
                let normal = Normal::new(0.0, weight_std)
                    .map_err(|e| EvoqError::config("policy.init.weight_std", e.to_string()))?;
                for w in params.weights.iter_mut() {
                    *w = normal.sample(&mut rng);
                }
            }
            PolicyInit::Prior {
                sharpness,
                distortion_std,
            } => {
                let normal = Normal::new(0.0, distortion_std)
                    .map_err(|e| EvoqError::config("policy.init.distortion_std", e.to_string()))?;
                for b in 0..scale.n_bins {
                    let row = embedding.embed(scale.center(b));
                    for (c, w) in row.iter().enumerate() {
                        params.weights[b * dim + c] = sharpness * w + normal.sample(&mut rng);
                    }
                    params.biases[b] = -0.5 * sharpness * row.iter().map(|w| w * w).sum::<f64>();
                }
            }
        }
        Ok(params)
    }

    pub fn n_bins(&self) -> usize {
        self.scale.n_bins
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.biases)
            .all(|x| x.is_finite())
    }

    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.dim {
            return Err(EvoqError::Shape {
                expected: self.dim,
                actual: features.len(),
            });
        }
        Ok(self
            .weights
            .chunks_exact(self.dim)
            .zip(&self.biases)
            .map(|(row, b)| row.iter().zip(features).map(|(w, f)| w * f).sum::<f64>() + b)
            .collect())
    }

    /// Log-softmax of the logits; the single code path behind every
    /// probability the policy reports.
    pub fn log_probs(&self, features: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.logits(features)?;
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in z.iter_mut() {
            *v -= lse;
        }
        Ok(z)
    }

    /// Flat view in `weights ++ biases` order.
    pub fn flatten(&self) -> Vec<f64> {
        self.weights.iter().chain(&self.biases).copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let nw = self.weights.len();
        self.weights.copy_from_slice(&flat[..nw]);
        self.biases.copy_from_slice(&flat[nw..]);
    }
}

pub fn score_distribution(params: &PolicyParams, features: &[f64]) -> Result<Vec<f64>> {
    Ok(params
        .log_probs(features)?
        .into_iter()
        .map(f64::exp)
        .collect())
}

pub fn log_prob_of(params: &PolicyParams, features: &[f64], bin: usize) -> Result<f64> {
    if bin >= params.n_bins() {
        return Err(EvoqError::InvalidBin {
            bin,
            n_bins: params.n_bins(),
        });
    }
    Ok(params.log_probs(features)?[bin])
}

/// Exact mean score of the policy's distribution for one image.
pub fn expected_score(params: &PolicyParams, features: &[f64]) -> Result<f64> {
    let probs = score_distribution(params, features)?;
    Ok(probs
        .iter()
        .enumerate()
        .map(|(b, p)| p * params.scale.center(b))
        .sum())
}

/// One rollout of the scoring prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSample {
    pub score: f64,
    pub bin: usize,
    /// `log π(bin)` under the sampling snapshot; absent for external peers
    /// that do not report log-probabilities.
    pub log_prob: Option<f64>,
    pub snapshot_tag: String,
}

fn draw_bin(probs: &[f64], rng: &mut StreamRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (b, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            last_positive = b;
        }
        acc += p;
        if u < acc && *p > 0.0 {
            return b;
        }
    }
    // rounding left u above the accumulated mass
    last_positive
}

pub fn sample_scores(
    params: &PolicyParams,
    features: &[f64],
    k: usize,
    seed: u64,
    snapshot_tag: &str,
) -> Result<Vec<ScoreSample>> {
    if k == 0 {
        return Err(EvoqError::EmptyBudget);
    }
    let logp = params.log_probs(features)?;
    let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let mut rng = rng_from_seed(seed);
    Ok((0..k)
        .map(|_| {
            let bin = draw_bin(&probs, &mut rng);
            ScoreSample {
                score: params.scale.center(bin),
                bin,
                log_prob: Some(logp[bin]),
                snapshot_tag: snapshot_tag.to_owned(),
            }
        })
        .collect())
}

/// Answer to the comparison prompt: which presented image looks better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ComparisonVote {
    First,
    Second,
}

impl ComparisonVote {
    pub fn index(self) -> u8 {
        match self {
            ComparisonVote::First => 0,
            ComparisonVote::Second => 1,
        }
    }

    pub fn from_index(idx: u8) -> Option<Self> {
        match idx {
            0 => Some(ComparisonVote::First),
            1 => Some(ComparisonVote::Second),
            _ => None,
        }
    }
}

fn compare_draw(
    scale: &QualityScale,
    probs_a: &[f64],
    probs_b: &[f64],
    position_bias: f64,
    rng: &mut StreamRng,
) -> ComparisonVote {
    let a = scale.center(draw_bin(probs_a, rng)) + position_bias;
    let b = scale.center(draw_bin(probs_b, rng));
    if a > b {
        ComparisonVote::First
    } else if b > a {
        ComparisonVote::Second
    } else if rng.random::<bool>() {
        ComparisonVote::First
    } else {
        ComparisonVote::Second
    }
}

/// One comparison query: draw a score for each image, shift the first by
/// `position_bias`, vote for the larger, break exact ties with a fair coin.
pub fn compare(
    params: &PolicyParams,
    features_a: &[f64],
    features_b: &[f64],
    position_bias: f64,
    seed: u64,
) -> Result<ComparisonVote> {
    let pa = score_distribution(params, features_a)?;
    let pb = score_distribution(params, features_b)?;
    Ok(compare_draw(
        &params.scale,
        &pa,
        &pb,
        position_bias,
        &mut rng_from_seed(seed),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotRole {
    Current,
    Old,
    Reference,
}

/// An immutable deep copy of policy parameters in one of the three roles
/// the optimization needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    pub role: SnapshotRole,
    pub tag: String,
    pub params: PolicyParams,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    role: SnapshotRole,
    tag: String,
    n_bins: usize,
    d: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl PolicySnapshot {
    pub fn new(role: SnapshotRole, tag: impl Into<String>, params: &PolicyParams) -> Self {
        Self {
            role,
            tag: tag.into(),
            params: params.clone(),
        }
    }

    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let doc = CheckpointDoc {
            role: self.role,
            tag: self.tag.clone(),
            n_bins: self.params.n_bins(),
            d: self.params.dim,
            weights: self.params.weights.clone(),
            biases: self.params.biases.clone(),
        };
        serde_json::to_writer_pretty(&mut out, &doc)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    /// Reads a checkpoint; the score range is the default `[1, 5]` scale with
    /// the stored bin count.
    pub fn read_checkpoint<R: Read>(input: R) -> Result<Self> {
        let doc: CheckpointDoc = serde_json::from_reader(input)?;
        let scale = QualityScale::with_bins(doc.n_bins);
        scale.validate()?;
        if doc.weights.len() != doc.n_bins * doc.d {
            return Err(EvoqError::Shape {
                expected: doc.n_bins * doc.d,
                actual: doc.weights.len(),
            });
        }
        if doc.biases.len() != doc.n_bins {
            return Err(EvoqError::Shape {
                expected: doc.n_bins,
                actual: doc.biases.len(),
            });
        }
        let params = PolicyParams {
            scale,
            dim: doc.d,
            weights: doc.weights,
            biases: doc.biases,
        };
        if !params.is_finite() {
            return Err(EvoqError::Numerical(
                "checkpoint holds non-finite parameters".into(),
            ));
        }
        Ok(Self {
            role: doc.role,
            tag: doc.tag,
            params,
        })
    }
}

/// What the engine needs from a policy, whether in-process or remote.
pub trait PolicyBackend: Send + Sync {
    /// `k` comparison queries presenting `first` then `second`. `None`
    /// entries are answers the backend could not parse.
    fn compare_many(
        &self,
        first: &LatentImage,
        second: &LatentImage,
        k: usize,
        seed: u64,
    ) -> Result<Vec<Option<ComparisonVote>>>;

    /// `k` scoring rollouts for one image.
    fn sample_many(&self, image: &LatentImage, k: usize, seed: u64) -> Result<Vec<ScoreSample>>;

    fn scale(&self) -> QualityScale;
}

/// The in-process softmax policy frozen at one snapshot.
#[derive(Debug, Clone)]
pub struct BuiltinPolicy {
    pub snapshot: PolicySnapshot,
    pub position_bias: f64,
}

impl BuiltinPolicy {
    pub fn new(snapshot: PolicySnapshot) -> Self {
        Self {
            snapshot,
            position_bias: 0.0,
        }
    }

    pub fn with_position_bias(mut self, bias: f64) -> Self {
        self.position_bias = bias;
        self
    }
}

impl PolicyBackend for BuiltinPolicy {
    fn compare_many(
        &self,
        first: &LatentImage,
        second: &LatentImage,
        k: usize,
        seed: u64,
    ) -> Result<Vec<Option<ComparisonVote>>> {
        let params = &self.snapshot.params;
        let pa = score_distribution(params, &first.features)?;
        let pb = score_distribution(params, &second.features)?;
        let mut rng = rng_from_seed(seed);
        Ok((0..k)
            .map(|_| {
                Some(compare_draw(
                    &params.scale,
                    &pa,
                    &pb,
                    self.position_bias,
                    &mut rng,
                ))
            })
            .collect())
    }

    fn sample_many(&self, image: &LatentImage, k: usize, seed: u64) -> Result<Vec<ScoreSample>> {
        sample_scores(
            &self.snapshot.params,
            &image.features,
            k,
            seed,
            &self.snapshot.tag,
        )
    }

    fn scale(&self) -> QualityScale {
        self.snapshot.params.scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point_mass(scale: QualityScale, dim: usize, bin: usize) -> PolicyParams {
        let mut p = PolicyParams::zeros(scale, dim);
        p.biases[bin] = 60.0;
        p
    }

    #[test]
    fn scale_centers() {
        let s = QualityScale::default();
        assert_eq!(s.n_bins, 17);
        assert_eq!(s.center(0), 1.0);
        assert_eq!(s.center(8), 3.0);
        assert_eq!(s.center(16), 5.0);
        assert_eq!(s.center(1), 1.25);
        assert_eq!(s.nearest_bin(4.26), 13);
        assert_eq!(s.nearest_bin(9.0), 16);
    }

    #[test]
    fn uniform_distribution_at_zero() {
        let p = PolicyParams::zeros(QualityScale::default(), 4);
        let d = score_distribution(&p, &[0.3, 0.1, -2.0, 1.0]).unwrap();
        for v in &d {
            assert!((v - 1.0 / 17.0).abs() < 1e-15);
        }
        let lp = log_prob_of(&p, &[0.0; 4], 5).unwrap();
        assert!((lp - (1.0f64 / 17.0).ln()).abs() < 1e-12);
        assert!((lp + 2.833).abs() < 1e-3);
    }

    #[test]
    fn dominant_bias_bin() {
        let mut p = PolicyParams::zeros(QualityScale::default(), 2);
        p.biases[16] = 10.0;
        let d = score_distribution(&p, &[0.0, 0.0]).unwrap();
        // e^10 / (16 + e^10)
        let expected = 10f64.exp() / (16.0 + 10f64.exp());
        assert!((d[16] - expected).abs() < 1e-12);
        assert!(d[16] > 0.99);
    }

    #[test]
    fn softmax_shift_invariance() {
        let p = PolicyParams::init(
            QualityScale::default(),
            &crate::world::FeatureEmbedding::grid(3),
            &PolicyInit::Random { weight_std: 1.0 },
            4,
        )
        .unwrap();
        let mut q = p.clone();
        for b in q.biases.iter_mut() {
            *b += 123.0;
        }
        let f = [0.2, -0.4, 0.9];
        let (a, b) = (
            score_distribution(&p, &f).unwrap(),
            score_distribution(&q, &f).unwrap(),
        );
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn shape_and_bin_errors() {
        let p = PolicyParams::zeros(QualityScale::default(), 3);
        assert!(matches!(
            score_distribution(&p, &[1.0]),
            Err(EvoqError::Shape {
                expected: 3,
                actual: 1
            })
        ));
        assert!(matches!(
            log_prob_of(&p, &[0.0; 3], 17),
            Err(EvoqError::InvalidBin { .. })
        ));
        assert!(matches!(
            sample_scores(&p, &[0.0; 3], 0, 1, "t"),
            Err(EvoqError::EmptyBudget)
        ));
    }

    #[test]
    fn point_mass_samples() {
        let p = point_mass(QualityScale::default(), 2, 13);
        let s = sample_scores(&p, &[0.0, 0.0], 32, 5, "t").unwrap();
        assert_eq!(s.len(), 32);
        for x in &s {
            assert_eq!(x.bin, 13);
            assert_eq!(x.score, 4.25);
            assert_eq!(x.log_prob, Some(0.0));
        }
    }

    #[test]
    fn sampled_log_probs_match_distribution() {
        let p = PolicyParams::init(
            QualityScale::default(),
            &crate::world::FeatureEmbedding::grid(4),
            &PolicyInit::Random { weight_std: 0.7 },
            8,
        )
        .unwrap();
        let f = [0.5, 0.1, 0.3, 0.9];
        for s in sample_scores(&p, &f, 50, 3, "t").unwrap() {
            assert_eq!(s.log_prob.unwrap(), log_prob_of(&p, &f, s.bin).unwrap());
            assert_eq!(s.score, p.scale.center(s.bin));
        }
    }

    #[test]
    fn empirical_frequencies_match() {
        let p = PolicyParams::init(
            QualityScale::default(),
            &crate::world::FeatureEmbedding::grid(4),
            &PolicyInit::Random { weight_std: 0.8 },
            21,
        )
        .unwrap();
        let f = [0.9, 0.2, 0.4, 0.1];
        let probs = score_distribution(&p, &f).unwrap();
        let n = 10_000;
        let mut counts = [0usize; 17];
        for s in sample_scores(&p, &f, n, 77, "t").unwrap() {
            counts[s.bin] += 1;
        }
        for (c, q) in counts.iter().zip(&probs) {
            let mean = n as f64 * q;
            let sd = (n as f64 * q * (1.0 - q)).sqrt();
            assert!(
                (*c as f64 - mean).abs() <= 3.0 * sd + 1.0,
                "count {c} vs {mean} ± {sd}"
            );
        }
    }

    #[test]
    fn compare_point_masses() {
        let s = QualityScale::default();
        // bin 12 → 4.0 for feature e0, bin 4 → 2.0 for feature e1
        let mut p = PolicyParams::zeros(s, 2);
        p.weights[12 * 2] = 60.0;
        p.weights[4 * 2 + 1] = 60.0;
        for seed in 0..200 {
            assert_eq!(
                compare(&p, &[1.0, 0.0], &[0.0, 1.0], 0.0, seed).unwrap(),
                ComparisonVote::First
            );
        }
        let eq = point_mass(s, 2, 8);
        for seed in 0..200 {
            assert_eq!(
                compare(&eq, &[0.0; 2], &[0.0; 2], 0.25, seed).unwrap(),
                ComparisonVote::First
            );
        }
    }

    #[test]
    fn compare_symmetry_frequency() {
        let p = PolicyParams::init(
            QualityScale::default(),
            &crate::world::FeatureEmbedding::grid(3),
            &PolicyInit::Random { weight_std: 0.5 },
            2,
        )
        .unwrap();
        let f = [0.3, 0.3, 0.3];
        let n = 10_000;
        let first = (0..n)
            .filter(|&s| compare(&p, &f, &f, 0.0, s).unwrap() == ComparisonVote::First)
            .count();
        let freq = first as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.02, "freq = {freq}");
    }

    #[test]
    fn compare_antisymmetry_in_distribution() {
        let p = PolicyParams::init(
            QualityScale::default(),
            &crate::world::FeatureEmbedding::grid(3),
            &PolicyInit::Random { weight_std: 1.5 },
            6,
        )
        .unwrap();
        let (a, b) = ([0.9, 0.1, 0.0], [0.1, 0.5, 0.8]);
        let n = 10_000u64;
        let ab = (0..n)
            .filter(|&s| compare(&p, &a, &b, 0.0, s).unwrap() == ComparisonVote::First)
            .count();
        let ba = (0..n)
            .filter(|&s| compare(&p, &b, &a, 0.0, s).unwrap() == ComparisonVote::Second)
            .count();
        assert!(
            (ab as f64 - ba as f64).abs() / n as f64 <= 0.02,
            "{ab} vs {ba}"
        );
    }

    #[test]
    fn snapshot_isolation() {
        let mut current = PolicyParams::zeros(QualityScale::default(), 2);
        let old = PolicySnapshot::new(SnapshotRole::Old, "r1/b0", &current);
        let before = score_distribution(&old.params, &[1.0, 1.0]).unwrap();
        current.biases[3] = 5.0;
        current.weights[0] = -1.0;
        assert_eq!(
            score_distribution(&old.params, &[1.0, 1.0]).unwrap(),
            before
        );
    }

    #[test]
    fn checkpoint_round_trip_is_bit_stable() {
        let p = PolicyParams::init(
            QualityScale::default(),
            &crate::world::FeatureEmbedding::grid(5),
            &PolicyInit::Random { weight_std: 0.3 },
            1,
        )
        .unwrap();
        let snap = PolicySnapshot::new(SnapshotRole::Reference, "round0", &p);
        let mut buf = Vec::new();
        snap.write_checkpoint(&mut buf).unwrap();
        let back = PolicySnapshot::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, snap);
        for (a, b) in back.params.weights.iter().zip(&p.weights) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn prior_init_tracks_quality() {
        let p = PolicyParams::init(
            QualityScale::default(),
            &crate::world::FeatureEmbedding::grid(12),
            &PolicyInit::Prior {
                sharpness: 4.0,
                distortion_std: 0.0,
            },
            0,
        )
        .unwrap();
        let lo = expected_score(&p, &FeatureEmbedding::grid(12).embed(1.5)).unwrap();
        let hi = expected_score(&p, &FeatureEmbedding::grid(12).embed(4.5)).unwrap();
        assert!(hi > lo + 1.0, "{lo} {hi}");
    }
}
