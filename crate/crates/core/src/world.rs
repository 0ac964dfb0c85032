//! Synthetic perceptual world.
//!
//! A corpus is a set of pristine references, each followed by distorted
//! variants. Every image carries a hidden `true_quality` in `[1, 5]` and an
//! observable feature vector: `feature_dim` Gaussian bumps of width
//! `feature_bandwidth` centred on an even grid over `[1, 5]`, evaluated at
//! the true quality, plus isotropic noise.
//! Only the evaluation path may read `true_quality`.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{EvoqError, Result};
use crate::seed::SeedDerivation;

pub type ImageId = u32;

pub const MIN_QUALITY: f64 = 1.0;
pub const MAX_QUALITY: f64 = 5.0;
/// References draw their quality uniformly from this interval so that
/// distortions, which only remove quality, mostly stay inside `[1, 5]`.
pub const REFERENCE_QUALITY_RANGE: (f64, f64) = (2.5, 5.0);
pub const DEFAULT_BANDWIDTH: f64 = 4.0 / 11.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentImage {
    pub id: ImageId,
    pub true_quality: f64,
    pub reference_id: Option<ImageId>,
    pub distortion_type: Option<u32>,
    pub severity: Option<u32>,
    pub features: Vec<f64>,
}

impl LatentImage {
    pub fn is_reference(&self) -> bool {
        self.reference_id.is_none()
    }

    /// Id of the pristine image this one descends from (itself for references).
    pub fn lineage(&self) -> ImageId {
        self.reference_id.unwrap_or(self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_references: usize,
    pub variants_per_reference: usize,
    pub n_distortion_types: usize,
    pub n_severity_levels: usize,
    pub feature_dim: usize,
    /// Bump width in quality units. Wider bumps share more of the feature
    /// space across distant qualities.
    pub feature_bandwidth: f64,
    pub feature_noise_sigma: f64,
    /// Quality removed at each severity level (index 0 is severity 1).
    pub quality_drop_per_severity: Vec<f64>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_references: 2000,
            variants_per_reference: 10,
            n_distortion_types: 35,
            n_severity_levels: 5,
            feature_dim: 12,
            feature_bandwidth: DEFAULT_BANDWIDTH,
            feature_noise_sigma: 0.2,
            quality_drop_per_severity: vec![0.2, 0.5, 1.0, 1.8, 2.8],
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_references", self.n_references),
            ("variants_per_reference", self.variants_per_reference),
            ("n_distortion_types", self.n_distortion_types),
            ("n_severity_levels", self.n_severity_levels),
            ("feature_dim", self.feature_dim),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(EvoqError::config(
                    format!("world.{name}"),
                    "must be positive",
                ));
            }
        }
        if self.feature_dim < 2 {
            return Err(EvoqError::config("world.feature_dim", "must be at least 2"));
        }
        if self.variants_per_reference > self.n_distortion_types {
            return Err(EvoqError::config(
                "world.variants_per_reference",
                "cannot exceed n_distortion_types (each variant uses a distinct type)",
            ));
        }
        if !(self.feature_bandwidth > 0.0 && self.feature_bandwidth.is_finite()) {
            return Err(EvoqError::config(
                "world.feature_bandwidth",
                "must be finite and > 0",
            ));
        }
        if !(self.feature_noise_sigma >= 0.0 && self.feature_noise_sigma.is_finite()) {
            return Err(EvoqError::config(
                "world.feature_noise_sigma",
                "must be finite and >= 0",
            ));
        }
        let drops = &self.quality_drop_per_severity;
        if drops.len() != self.n_severity_levels {
            return Err(EvoqError::config(
                "world.quality_drop_per_severity",
                format!(
                    "needs one entry per severity level ({})",
                    self.n_severity_levels
                ),
            ));
        }
        if drops.iter().any(|d| !d.is_finite() || *d < 0.0) || drops.windows(2).any(|w| w[1] < w[0])
        {
            return Err(EvoqError::config(
                "world.quality_drop_per_severity",
                "must be finite, nonnegative and nondecreasing",
            ));
        }
        Ok(())
    }

    /// Multiplier applied to the severity drop for a distortion type, spread
    /// evenly over `[0.75, 1.0]` so some distortion families are milder.
    pub fn type_scale(&self, distortion_type: u32) -> f64 {
        if self.n_distortion_types <= 1 {
            return 1.0;
        }
        0.75 + 0.25 * distortion_type as f64 / (self.n_distortion_types - 1) as f64
    }

    pub fn variant_quality(&self, parent_quality: f64, distortion_type: u32, severity: u32) -> f64 {
        let drop = self.quality_drop_per_severity[severity as usize - 1]
            * self.type_scale(distortion_type);
        (parent_quality - drop).clamp(MIN_QUALITY, MAX_QUALITY)
    }

    pub fn embedding(&self) -> FeatureEmbedding {
        FeatureEmbedding {
            dim: self.feature_dim,
            bandwidth: self.feature_bandwidth,
        }
    }
}

/// Noise-free map from quality to features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureEmbedding {
    pub dim: usize,
    pub bandwidth: f64,
}

impl FeatureEmbedding {
    /// Bump width equal to the grid spacing.
    pub fn grid(dim: usize) -> Self {
        Self {
            dim,
            bandwidth: (MAX_QUALITY - MIN_QUALITY) / (dim.max(2) - 1) as f64,
        }
    }

    pub fn embed(&self, quality: f64) -> Vec<f64> {
        let spacing = (MAX_QUALITY - MIN_QUALITY) / (self.dim - 1) as f64;
        (0..self.dim)
            .map(|c| {
                let center = MIN_QUALITY + spacing * c as f64;
                let z = (quality - center) / self.bandwidth;
                (-0.5 * z * z).exp()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub images: Vec<LatentImage>,
    pub seed: u64,
    pub config: WorldConfig,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn get(&self, id: ImageId) -> Result<&LatentImage> {
        self.images
            .get(id as usize)
            .ok_or(EvoqError::UnknownImage(id))
    }

    pub fn reference_ids(&self) -> Vec<ImageId> {
        self.images
            .iter()
            .filter(|im| im.is_reference())
            .map(|im| im.id)
            .collect()
    }

    pub fn all_ids(&self) -> Vec<ImageId> {
        self.images.iter().map(|im| im.id).collect()
    }

    /// Checks id density and that every reference id resolves to a reference.
    pub fn validate(&self) -> Result<()> {
        for (idx, im) in self.images.iter().enumerate() {
            if im.id as usize != idx {
                return Err(EvoqError::Numerical(format!(
                    "corpus ids not dense at index {idx}"
                )));
            }
            if let Some(r) = im.reference_id {
                if !self.get(r)?.is_reference() {
                    return Err(EvoqError::Numerical(format!(
                        "image {} has non-reference parent {r}",
                        im.id
                    )));
                }
            }
            if im.features.iter().any(|f| !f.is_finite()) {
                return Err(EvoqError::Numerical(format!(
                    "image {} has non-finite features",
                    im.id
                )));
            }
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for im in &self.images {
            serde_json::to_writer(&mut out, im)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R, seed: u64, config: WorldConfig) -> Result<Corpus> {
        let mut images = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            images.push(serde_json::from_str(&line)?);
        }
        let corpus = Corpus {
            images,
            seed,
            config,
        };
        corpus.validate()?;
        Ok(corpus)
    }
}

pub fn generate_corpus(config: &WorldConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let seeds = SeedDerivation::new(seed);
    let quality_prior =
        Uniform::new_inclusive(REFERENCE_QUALITY_RANGE.0, REFERENCE_QUALITY_RANGE.1)
            .expect("static quality range");
    let noise = Normal::new(0.0, config.feature_noise_sigma)
        .map_err(|e| EvoqError::config("world.feature_noise_sigma", e.to_string()))?;

    let embedding = config.embedding();
    let lineage_size = 1 + config.variants_per_reference;
    let mut images = Vec::with_capacity(config.n_references * lineage_size);
    for r in 0..config.n_references {
        let mut rng = seeds.rng(&format!("world/ref/{r}"));
        let make = |id: usize, quality: f64, parent, dtype, severity, rng: &mut _| {
            let mut features = embedding.embed(quality);
            if config.feature_noise_sigma > 0.0 {
                for f in features.iter_mut() {
                    *f += noise.sample(rng);
                }
            }
            LatentImage {
                id: id as ImageId,
                true_quality: quality,
                reference_id: parent,
                distortion_type: dtype,
                severity,
                features,
            }
        };

        let ref_id = images.len();
        let ref_quality = quality_prior.sample(&mut rng);
        images.push(make(ref_id, ref_quality, None, None, None, &mut rng));

        let types = index::sample(
            &mut rng,
            config.n_distortion_types,
            config.variants_per_reference,
        );
        for dtype in types.iter() {
            let dtype = dtype as u32;
            let severity = rng.random_range(1..=config.n_severity_levels as u32);
            let quality = config.variant_quality(ref_quality, dtype, severity);
            let id = images.len();
            images.push(make(
                id,
                quality,
                Some(ref_id as ImageId),
                Some(dtype),
                Some(severity),
                &mut rng,
            ));
        }
    }
    Ok(Corpus {
        images,
        seed,
        config: config.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    Unrestricted,
    SameReference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSet {
    pub pairs: Vec<(ImageId, ImageId)>,
    pub mode: PairMode,
    pub seed: u64,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for &(i, j) in &self.pairs {
            serde_json::to_writer(&mut out, &[i, j])?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R, mode: PairMode, seed: u64) -> Result<PairSet> {
        let mut pairs = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let [i, j]: [ImageId; 2] = serde_json::from_str(&line)?;
            pairs.push((i, j));
        }
        Ok(PairSet { pairs, mode, seed })
    }
}

/// Samples `n_pairs` ordered pairs over the whole corpus.
pub fn sample_pairs(corpus: &Corpus, n_pairs: usize, mode: PairMode, seed: u64) -> Result<PairSet> {
    sample_pairs_among(corpus, &corpus.all_ids(), n_pairs, mode, seed)
}

/// Samples `n_pairs` ordered pairs, with replacement over the pair space,
/// restricted to `members`. In same-reference mode a lineage is chosen with
/// probability proportional to its number of ordered pairs, so every eligible
/// ordered pair is equally likely.
pub fn sample_pairs_among(
    corpus: &Corpus,
    members: &[ImageId],
    n_pairs: usize,
    mode: PairMode,
    seed: u64,
) -> Result<PairSet> {
    if corpus.is_empty() || members.is_empty() {
        return Err(EvoqError::InfeasibleSampling("empty corpus".into()));
    }
    for &id in members {
        corpus.get(id)?;
    }
    let mut rng = SeedDerivation::new(seed).rng("pairs");
    let mut pairs = Vec::with_capacity(n_pairs);
    match mode {
        PairMode::Unrestricted => {
            let n = members.len();
            if n < 2 {
                return Err(EvoqError::InfeasibleSampling(
                    "need at least two images".into(),
                ));
            }
            for _ in 0..n_pairs {
                let a = rng.random_range(0..n);
                let mut b = rng.random_range(0..n - 1);
                if b >= a {
                    b += 1;
                }
                pairs.push((members[a], members[b]));
            }
        }
        PairMode::SameReference => {
            let mut lineages: std::collections::BTreeMap<ImageId, Vec<ImageId>> =
                Default::default();
            for &id in members {
                lineages
                    .entry(corpus.get(id)?.lineage())
                    .or_default()
                    .push(id);
            }
            let eligible: Vec<Vec<ImageId>> =
                lineages.into_values().filter(|l| l.len() >= 2).collect();
            if eligible.is_empty() {
                return Err(EvoqError::InfeasibleSampling(
                    "no reference lineage has two or more members".into(),
                ));
            }
            let mut cumulative = Vec::with_capacity(eligible.len());
            let mut total = 0u64;
            for l in &eligible {
                total += (l.len() * (l.len() - 1)) as u64;
                cumulative.push(total);
            }
            for _ in 0..n_pairs {
                let ticket = rng.random_range(0..total);
                let li = cumulative.partition_point(|&c| c <= ticket);
                let lineage = &eligible[li];
                let n = lineage.len();
                let a = rng.random_range(0..n);
                let mut b = rng.random_range(0..n - 1);
                if b >= a {
                    b += 1;
                }
                pairs.push((lineage[a], lineage[b]));
            }
        }
    }
    Ok(PairSet { pairs, mode, seed })
}

/// Every partner of `id` in either position of the pair set.
pub fn pairings_of(pairset: &PairSet, corpus: &Corpus, id: ImageId) -> Result<BTreeSet<ImageId>> {
    corpus.get(id)?;
    Ok(pairset
        .pairs
        .iter()
        .filter_map(|&(i, j)| {
            if i == id {
                Some(j)
            } else if j == id {
                Some(i)
            } else {
                None
            }
        })
        .collect())
}
