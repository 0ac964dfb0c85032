//! Shared fixtures for the criterion benches.

use evoq_core::grpo::TrajectoryRecord;
use evoq_core::policy::{sample_scores, BuiltinPolicy, PolicySnapshot, SnapshotRole};
use evoq_core::reward::ScoreGroup;
use evoq_core::world::{generate_corpus, sample_pairs_among};
use evoq_core::{Corpus, ImageId, PairMode, PairSet, PolicyParams, RunConfig, WorldConfig};

pub struct Fixture {
    pub corpus: Corpus,
    pub pairs: PairSet,
    pub params: PolicyParams,
}

impl Fixture {
    /// Default world and initial policy, `n_pairs` reference pairs.
    pub fn new(n_references: usize, n_pairs: usize) -> Self {
        let config = RunConfig::default();
        let world = WorldConfig {
            n_references,
            ..config.world.clone()
        };
        let corpus = generate_corpus(&world, 1).expect("corpus");
        let pairs = sample_pairs_among(
            &corpus,
            &corpus.reference_ids(),
            n_pairs,
            PairMode::Unrestricted,
            2,
        )
        .expect("pairs");
        let params = config.initial_params().expect("params");
        Self {
            corpus,
            pairs,
            params,
        }
    }

    pub fn policy(&self) -> BuiltinPolicy {
        BuiltinPolicy::new(PolicySnapshot::new(
            SnapshotRole::Current,
            "bench",
            &self.params,
        ))
    }

    /// `k` sampled scores for image `id`.
    pub fn group(&self, id: ImageId, k: usize) -> ScoreGroup {
        let image = self.corpus.get(id).expect("image");
        let scores = sample_scores(&self.params, &image.features, k, id as u64, "bench")
            .expect("scores")
            .into_iter()
            .map(|s| s.score)
            .collect();
        ScoreGroup::new(id, scores).expect("group")
    }

    /// `groups` images with `k` trajectories each, advantages alternating ±1.
    pub fn batch(&self, groups: usize, k: usize) -> Vec<Vec<TrajectoryRecord>> {
        (0..groups as ImageId)
            .map(|id| {
                let image = self.corpus.get(id).expect("image");
                sample_scores(&self.params, &image.features, k, id as u64, "bench")
                    .expect("scores")
                    .into_iter()
                    .enumerate()
                    .map(|(n, s)| TrajectoryRecord {
                        image_id: id,
                        bin: s.bin,
                        features: image.features.clone(),
                        advantage: if n % 2 == 0 { 1.0 } else { -1.0 },
                        logp_old: s.log_prob.expect("builtin log prob"),
                    })
                    .collect()
            })
            .collect()
    }
}
