//! The self-evolution loop.
//!
//! Each round votes on a fresh pair set with the policy as it stands, then
//! trains on those pseudo-labels for `M` batches of `B` pairs. The policy that
//! votes in round `t` is the one trained through round `t − 1`.
//!
//! Seeds: every stream of round `t` hangs off `"round/<t>"` of the master
//! seed, so a round is reproducible from the previous checkpoint alone.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::{create_dir, digest_tree, write_file, write_json};
use crate::config::RunConfig;
use crate::error::{EvoqError, Result};
use crate::eval::{
    evaluate_dataset, policy_quality_estimate, write_metrics_csv, EstimateMode, RoundMetrics,
};
use crate::grpo::{grpo_loss, loss_gradient, optimizer_step, OptimizerState, TrajectoryRecord};
use crate::policy::{
    sample_scores, BuiltinPolicy, PolicyBackend, PolicyParams, PolicySnapshot, ScoreSample,
    SnapshotRole,
};
use crate::reward::{advantages, pair_terms, RewardAccumulator, ScoreGroup};
use crate::seed::{derive_seed, SeedDerivation};
use crate::voting::{run_offline_stage, PseudoLabel};
use crate::world::{
    generate_corpus, sample_pairs_among, Corpus, ImageId, LatentImage, PairMode, PairSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvolutionMode {
    /// Pairwise voting with fidelity rewards.
    Quality,
    /// Averaged direct scores with a thresholded hit reward.
    Estimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Population {
    References,
    All,
}

/// Which images a round pairs up, and how.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundRegime {
    pub population: Population,
    pub pair_mode: PairMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionConfig {
    #[serde(rename = "T")]
    pub rounds: usize,
    #[serde(rename = "M")]
    pub batches: usize,
    #[serde(rename = "B")]
    pub batch_size: usize,
    /// Voting budget, and sampling budget unless `sample_k` is set.
    #[serde(rename = "K")]
    pub k: usize,
    pub sample_k: Option<usize>,
    /// Pairs per round before `desk_scale`.
    pub n_pairs: usize,
    /// Multiplies `n_pairs` and `world.n_references`.
    pub desk_scale: f64,
    pub mode: EvolutionMode,
    /// Regime for round `t` is entry `t − 1`; later rounds reuse the last.
    pub regimes: Vec<RoundRegime>,
    pub permute_order: bool,
    pub position_bias: f64,
    pub estimate_tolerance: f64,
    pub holdout_references: usize,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            rounds: 2,
            batches: 100,
            batch_size: 4,
            k: 32,
            sample_k: None,
            n_pairs: 20_000,
            desk_scale: 0.1,
            mode: EvolutionMode::Quality,
            regimes: vec![
                RoundRegime {
                    population: Population::References,
                    pair_mode: PairMode::Unrestricted,
                },
                RoundRegime {
                    population: Population::All,
                    pair_mode: PairMode::SameReference,
                },
            ],
            permute_order: true,
            position_bias: 0.0,
            estimate_tolerance: 0.35,
            holdout_references: 100,
        }
    }
}

impl EvolutionConfig {
    pub fn effective_pairs(&self) -> usize {
        ((self.n_pairs as f64 * self.desk_scale).round() as usize).max(1)
    }

    pub fn sampling_k(&self) -> usize {
        self.sample_k.unwrap_or(self.k)
    }

    pub fn regime(&self, round: usize) -> RoundRegime {
        let idx = round
            .saturating_sub(1)
            .min(self.regimes.len().saturating_sub(1));
        self.regimes[idx]
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(EvoqError::config("evolution.T", "must be at least 1"));
        }
        if self.k == 0 {
            return Err(EvoqError::config("evolution.K", "must be at least 1"));
        }
        if self.sampling_k() < 2 {
            return Err(EvoqError::config(
                "evolution.sample_k",
                "online sampling needs at least 2 samples",
            ));
        }
        if self.batch_size == 0 {
            return Err(EvoqError::config("evolution.B", "must be at least 1"));
        }
        if !(self.desk_scale > 0.0 && self.desk_scale.is_finite()) {
            return Err(EvoqError::config("evolution.desk_scale", "must be > 0"));
        }
        if self.batches * self.batch_size > self.effective_pairs() {
            return Err(EvoqError::config(
                "evolution.M",
                format!(
                    "M·B = {} exceeds the {} pairs per round",
                    self.batches * self.batch_size,
                    self.effective_pairs()
                ),
            ));
        }
        if self.batch_size > self.effective_pairs() {
            return Err(EvoqError::config(
                "evolution.B",
                "batch larger than the pair set",
            ));
        }
        if self.regimes.is_empty() {
            return Err(EvoqError::config(
                "evolution.regimes",
                "needs at least one round regime",
            ));
        }
        if self.estimate_tolerance.is_nan() || self.estimate_tolerance <= 0.0 {
            return Err(EvoqError::config(
                "evolution.estimate_tolerance",
                "must be > 0",
            ));
        }
        if !self.position_bias.is_finite() {
            return Err(EvoqError::config(
                "evolution.position_bias",
                "must be finite",
            ));
        }
        if self.holdout_references < 2 {
            return Err(EvoqError::config(
                "evolution.holdout_references",
                "need at least 2",
            ));
        }
        Ok(())
    }
}

/// An external policy that can also receive the per-trajectory advantages it
/// must apply itself.
pub trait ExternalPolicy: PolicyBackend {
    fn export_advantages(&self, trajectory_ids: Vec<String>, advantages: Vec<f64>) -> Result<()>;
}

#[derive(Clone, Copy)]
pub enum Backend<'a> {
    Builtin,
    External(&'a dyn ExternalPolicy),
}

/// Held-out references, the population round 1 trains on.
pub const HOLDOUT_AUTHENTIC: &str = "holdout_authentic";
/// Held-out distorted variants.
pub const HOLDOUT_SYNTHETIC: &str = "holdout_synthetic";

/// Files and metrics one round leaves behind.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundArtifacts {
    pub round: usize,
    pub dir: PathBuf,
    pub pseudo_labels: PathBuf,
    pub votes: PathBuf,
    pub rewards: PathBuf,
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub metrics_path: PathBuf,
    pub metrics: RoundMetrics,
    pub steps: usize,
    /// Set when the round stopped early on a numerical failure.
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionOutcome {
    pub run_dir: PathBuf,
    pub baseline: RoundMetrics,
    pub rounds: Vec<RoundArtifacts>,
    pub final_params: PolicyParams,
}

/// Mutable state carried across rounds.
#[derive(Debug, Clone)]
pub struct EvolutionState {
    pub params: PolicyParams,
    pub corpus: Corpus,
    pub holdout: Corpus,
}

impl EvolutionState {
    pub fn initial(config: &RunConfig) -> Result<Self> {
        let seeds = SeedDerivation::new(config.master_seed);
        let world = config.scaled_world();
        let corpus = generate_corpus(&world, seeds.seed("world/train"))?;
        let holdout_world = crate::world::WorldConfig {
            n_references: config.evolution.holdout_references,
            ..world.clone()
        };
        let holdout = generate_corpus(&holdout_world, seeds.seed("world/holdout"))?;
        let params = config.initial_params()?;
        Ok(Self {
            params,
            corpus,
            holdout,
        })
    }
}

/// `1` if the sampled score lands within `tolerance` of the pseudo-MOS.
pub fn tolerance_reward(q_k: f64, pseudo_mos: f64, tolerance: f64) -> f64 {
    // closed interval; the slack absorbs decimal representation error
    if (q_k - pseudo_mos).abs() <= tolerance + 1e-12 {
        1.0
    } else {
        0.0
    }
}

/// Pseudo mean-opinion score per image: the average of `k` direct scores.
pub fn estimate_pseudo_scores(
    backend: &dyn PolicyBackend,
    images: &[&LatentImage],
    k: usize,
    seed: u64,
) -> Result<BTreeMap<ImageId, f64>> {
    if k == 0 {
        return Err(EvoqError::EmptyBudget);
    }
    images
        .par_iter()
        .map(|im| {
            let samples = backend.sample_many(
                im,
                k,
                derive_seed(seed, &format!("estimate/img/{}", im.id)),
            )?;
            let mean = samples.iter().map(|s| s.score).sum::<f64>() / samples.len() as f64;
            Ok((im.id, mean))
        })
        .collect()
}

/// Exact-mean (builtin) or sample-mean (external) scores on both holdout
/// subsets.
pub fn evaluate_policy(
    backend: Backend<'_>,
    params: &PolicyParams,
    holdout: &Corpus,
    round: usize,
    k: usize,
    seed: u64,
) -> Result<RoundMetrics> {
    let refs: Vec<&LatentImage> = holdout
        .images
        .iter()
        .filter(|im| im.is_reference())
        .collect();
    let variants: Vec<&LatentImage> = holdout
        .images
        .iter()
        .filter(|im| !im.is_reference())
        .collect();
    let estimate = |im: &LatentImage| -> Result<f64> {
        match backend {
            Backend::Builtin => policy_quality_estimate(params, im, EstimateMode::Mean, k, seed),
            Backend::External(ext) => {
                let s =
                    ext.sample_many(im, k, derive_seed(seed, &format!("eval/img/{}", im.id)))?;
                Ok(s.iter().map(|x| x.score).sum::<f64>() / s.len() as f64)
            }
        }
    };
    let mut datasets = vec![evaluate_dataset(HOLDOUT_AUTHENTIC, &refs, estimate)?];
    if variants.len() >= 2 {
        datasets.push(evaluate_dataset(HOLDOUT_SYNTHETIC, &variants, estimate)?);
    }
    RoundMetrics::new(round, datasets)
}

struct TrainLogRow {
    step: usize,
    round: usize,
    batch: usize,
    loss_total: f64,
    surrogate: f64,
    kl: f64,
    grad_norm: f64,
    lr: f64,
}

const TRAIN_LOG_HEADER: &str = "step,round,batch,loss_total,surrogate,kl,grad_norm,lr";

#[derive(Serialize)]
struct RewardLogRecord<'a> {
    image_id: ImageId,
    k: usize,
    q_k: f64,
    r_k: f64,
    a_k: f64,
    partners: &'a [ImageId],
}

#[derive(Serialize)]
struct EstimateVoteRecord {
    image_id: ImageId,
    #[serde(rename = "K")]
    k: usize,
    pseudo_mos: f64,
}

/// Offline supervision for one round.
enum Supervision {
    Pairwise {
        /// image → (partner, p* from this image's point of view), one entry
        /// per pair occurrence
        terms: HashMap<ImageId, Vec<(ImageId, f64)>>,
    },
    Estimate {
        pseudo_mos: BTreeMap<ImageId, f64>,
    },
}

fn pairwise_terms(labels: &[PseudoLabel]) -> HashMap<ImageId, Vec<(ImageId, f64)>> {
    let mut terms: HashMap<ImageId, Vec<(ImageId, f64)>> = HashMap::new();
    for l in labels {
        let s = l.swapped();
        terms
            .entry(l.pair.0)
            .or_default()
            .push((l.pair.1, l.p_star));
        terms
            .entry(s.pair.0)
            .or_default()
            .push((s.pair.1, s.p_star));
    }
    terms
}

/// The pair set round `round` votes on.
pub fn round_pairs(
    config: &RunConfig,
    corpus: &Corpus,
    round: usize,
    seed: u64,
) -> Result<PairSet> {
    let regime = config.evolution.regime(round);
    let members = match regime.population {
        Population::References => corpus.reference_ids(),
        Population::All => corpus.all_ids(),
    };
    sample_pairs_among(
        corpus,
        &members,
        config.evolution.effective_pairs(),
        regime.pair_mode,
        seed,
    )
}

fn draw_batches(n_pairs: usize, batches: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = crate::seed::rng_from_seed(seed);
    (0..batches)
        .map(|_| index::sample(&mut rng, n_pairs, batch_size).into_vec())
        .collect()
}

/// Seed namespace of round `round`; round 0 holds the baseline evaluation.
pub fn round_seeds(config: &RunConfig, round: usize) -> SeedDerivation {
    SeedDerivation::new(config.master_seed).child(&format!("round/{round}"))
}

/// Executes round `t` (1-based) and persists its artifacts under `dir`.
pub fn run_round(
    state: &mut EvolutionState,
    round: usize,
    config: &RunConfig,
    backend: Backend<'_>,
    dir: &Path,
) -> Result<RoundArtifacts> {
    let evo = &config.evolution;
    let seeds = round_seeds(config, round);
    create_dir(dir)?;

    let pairset = round_pairs(config, &state.corpus, round, seeds.seed("pairs"))?;
    write_file(&dir.join("pairs.jsonl"), |out| pairset.write_jsonl(out))?;

    let round_start = PolicySnapshot::new(
        SnapshotRole::Reference,
        format!("round{round}/start"),
        &state.params,
    );
    let voter = BuiltinPolicy::new(PolicySnapshot::new(
        SnapshotRole::Current,
        format!("round{round}/vote"),
        &state.params,
    ))
    .with_position_bias(evo.position_bias);
    let vote_backend: &dyn PolicyBackend = match backend {
        Backend::Builtin => &voter,
        Backend::External(ext) => ext,
    };

    let labels_path = dir.join("pseudo_labels.jsonl");
    let votes_path = dir.join("votes.jsonl");
    let supervision = match evo.mode {
        EvolutionMode::Quality => {
            let outcome = run_offline_stage(
                vote_backend,
                &state.corpus,
                &pairset,
                evo.k,
                evo.permute_order,
                seeds.seed("vote"),
            )?;
            write_file(&votes_path, |out| outcome.write_vote_log(out))?;
            write_file(&labels_path, |out| outcome.write_labels(out))?;
            Supervision::Pairwise {
                terms: pairwise_terms(&outcome.labels),
            }
        }
        EvolutionMode::Estimate => {
            let ids: BTreeSet<ImageId> = pairset.pairs.iter().flat_map(|&(i, j)| [i, j]).collect();
            let images: Vec<&LatentImage> = ids
                .iter()
                .map(|&id| state.corpus.get(id))
                .collect::<Result<_>>()?;
            let pseudo_mos =
                estimate_pseudo_scores(vote_backend, &images, evo.k, seeds.seed("estimate"))?;
            write_file(&votes_path, |out| {
                for (&image_id, &mos) in &pseudo_mos {
                    serde_json::to_writer(
                        &mut *out,
                        &EstimateVoteRecord {
                            image_id,
                            k: evo.k,
                            pseudo_mos: mos,
                        },
                    )?;
                    out.write_all(b"\n")?;
                }
                Ok(())
            })?;
            write_file(&labels_path, |out| {
                for (&image_id, &mos) in &pseudo_mos {
                    serde_json::to_writer(
                        &mut *out,
                        &serde_json::json!({ "image_id": image_id, "pseudo_mos": mos }),
                    )?;
                    out.write_all(b"\n")?;
                }
                Ok(())
            })?;
            Supervision::Estimate { pseudo_mos }
        }
    };

    let online = run_online_stage(
        state,
        round,
        config,
        backend,
        &pairset,
        &supervision,
        &round_start,
        &seeds,
    )?;

    let rewards_path = dir.join("rewards.jsonl");
    std::fs::write(&rewards_path, &online.reward_log)
        .map_err(|e| EvoqError::io(&rewards_path, e))?;
    let train_log = dir.join("train_log.csv");
    write_file(&train_log, |out| {
        writeln!(out, "{TRAIN_LOG_HEADER}")?;
        for r in &online.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.step, r.round, r.batch, r.loss_total, r.surrogate, r.kl, r.grad_norm, r.lr
            )?;
        }
        Ok(())
    })?;
    let checkpoint = dir.join("checkpoint.json");
    let snap = PolicySnapshot::new(
        SnapshotRole::Current,
        format!("round{round}/end"),
        &state.params,
    );
    write_file(&checkpoint, |out| snap.write_checkpoint(out))?;

    let metrics = evaluate_policy(
        backend,
        &state.params,
        &state.holdout,
        round,
        evo.sampling_k(),
        seeds.seed("eval"),
    )?;
    let metrics_path = dir.join("metrics.json");
    write_json(&metrics_path, &metrics)?;

    Ok(RoundArtifacts {
        round,
        dir: dir.to_path_buf(),
        pseudo_labels: labels_path,
        votes: votes_path,
        rewards: rewards_path,
        checkpoint,
        train_log,
        metrics_path,
        metrics,
        steps: online.rows.len(),
        aborted: online.aborted,
    })
}

struct OnlineOutcome {
    rows: Vec<TrainLogRow>,
    reward_log: Vec<u8>,
    aborted: Option<String>,
}

#[allow(clippy::too_many_arguments)]
fn run_online_stage(
    state: &mut EvolutionState,
    round: usize,
    config: &RunConfig,
    backend: Backend<'_>,
    pairset: &PairSet,
    supervision: &Supervision,
    reference: &PolicySnapshot,
    seeds: &SeedDerivation,
) -> Result<OnlineOutcome> {
    let evo = &config.evolution;
    let k = evo.sampling_k();
    let batches = draw_batches(
        pairset.len(),
        evo.batches,
        evo.batch_size,
        seeds.seed("batches"),
    );
    let mut opt = OptimizerState::new(&state.params, Some(evo.batches));
    let mut rows = Vec::with_capacity(batches.len());
    let mut reward_log = Vec::new();
    let no_partners: Vec<(ImageId, f64)> = Vec::new();

    for (m, batch) in batches.iter().enumerate() {
        let old = PolicySnapshot::new(
            SnapshotRole::Old,
            format!("round{round}/batch{m}"),
            &state.params,
        );

        // batched images in first-appearance order
        let mut batch_images: Vec<ImageId> = Vec::new();
        for &p in batch {
            let (i, j) = pairset.pairs[p];
            for id in [i, j] {
                if !batch_images.contains(&id) {
                    batch_images.push(id);
                }
            }
        }
        let mut needed: BTreeSet<ImageId> = batch_images.iter().copied().collect();
        if let Supervision::Pairwise { terms } = supervision {
            for id in &batch_images {
                needed.extend(
                    terms
                        .get(id)
                        .unwrap_or(&no_partners)
                        .iter()
                        .map(|(p, _)| *p),
                );
            }
        }

        let sampled: Vec<(ImageId, Vec<ScoreSample>)> = needed
            .par_iter()
            .map(|&id| {
                let image = state.corpus.get(id)?;
                let seed = seeds.seed(&format!("batch/{m}/score/img/{id}"));
                let samples = match backend {
                    Backend::Builtin => {
                        sample_scores(&old.params, &image.features, k, seed, &old.tag)?
                    }
                    Backend::External(ext) => ext.sample_many(image, k, seed)?,
                };
                Ok((id, samples))
            })
            .collect::<Result<_>>()?;
        let samples: HashMap<ImageId, Vec<ScoreSample>> = sampled.into_iter().collect();
        let groups: HashMap<ImageId, ScoreGroup> = samples
            .iter()
            .map(|(&id, s)| {
                Ok((
                    id,
                    ScoreGroup::new(id, s.iter().map(|x| x.score).collect())?,
                ))
            })
            .collect::<Result<_>>()?;

        let mut records: Vec<Vec<TrajectoryRecord>> = Vec::with_capacity(batch_images.len());
        let mut export_ids = Vec::new();
        let mut export_adv = Vec::new();
        for &id in &batch_images {
            let group = &groups[&id];
            let (rewards, partners) = match supervision {
                Supervision::Pairwise { terms } => {
                    let mut acc = RewardAccumulator::new(k);
                    for &(partner, p_star) in terms.get(&id).unwrap_or(&no_partners) {
                        acc.add(
                            partner,
                            &pair_terms(p_star, group, &groups[&partner], &config.reward),
                        );
                    }
                    (acc.rewards(id)?, acc.partners)
                }
                Supervision::Estimate { pseudo_mos } => {
                    let mos = pseudo_mos[&id];
                    let r = group
                        .scores
                        .iter()
                        .map(|&q| tolerance_reward(q, mos, evo.estimate_tolerance))
                        .collect();
                    (r, Vec::new())
                }
            };
            let adv = advantages(&rewards, &config.reward)?;
            let image = state.corpus.get(id)?;
            let mut group_records = Vec::with_capacity(k);
            for (kk, s) in samples[&id].iter().enumerate() {
                serde_json::to_writer(
                    &mut reward_log,
                    &RewardLogRecord {
                        image_id: id,
                        k: kk,
                        q_k: s.score,
                        r_k: rewards[kk],
                        a_k: adv[kk],
                        partners: &partners,
                    },
                )?;
                reward_log.push(b'\n');
                if let Backend::External(_) = backend {
                    export_ids.push(format!("r{round}/b{m}/i{id}/k{kk}"));
                    export_adv.push(adv[kk]);
                }
                group_records.push(TrajectoryRecord {
                    image_id: id,
                    bin: s.bin,
                    features: image.features.clone(),
                    advantage: adv[kk],
                    logp_old: s.log_prob.unwrap_or(f64::NAN),
                });
            }
            records.push(group_records);
        }

        match backend {
            Backend::External(ext) => {
                ext.export_advantages(export_ids, export_adv)?;
                rows.push(TrainLogRow {
                    step: rows.len(),
                    round,
                    batch: m,
                    loss_total: f64::NAN,
                    surrogate: f64::NAN,
                    kl: f64::NAN,
                    grad_norm: f64::NAN,
                    lr: 0.0,
                });
            }
            Backend::Builtin => {
                let step = (|| -> Result<TrainLogRow> {
                    let loss = grpo_loss(&state.params, &reference.params, &records, &config.grpo)?;
                    let grad =
                        loss_gradient(&state.params, &reference.params, &records, &config.grpo)?;
                    let mut next = state.params.clone();
                    let lr = optimizer_step(&mut next, &grad, &mut opt, &config.grpo)?;
                    state.params = next;
                    Ok(TrainLogRow {
                        step: rows.len(),
                        round,
                        batch: m,
                        loss_total: loss.total,
                        surrogate: loss.surrogate_term,
                        kl: loss.kl_term,
                        grad_norm: grad.norm(),
                        lr,
                    })
                })();
                match step {
                    Ok(row) => rows.push(row),
                    Err(e @ (EvoqError::Numerical(_) | EvoqError::DivergedPolicy(_))) => {
                        return Ok(OnlineOutcome {
                            rows,
                            reward_log,
                            aborted: Some(e.to_string()),
                        });
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(OnlineOutcome {
        rows,
        reward_log,
        aborted: None,
    })
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a RunConfig,
    master_seed: u64,
    seeds: BTreeMap<String, u64>,
    rounds: Vec<ManifestRound>,
    artifacts: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct ManifestRound {
    round: usize,
    steps: usize,
    aborted: Option<String>,
    wavg_plcc: f64,
    wavg_srcc: f64,
}

pub const MANIFEST: &str = "manifest.json";
pub const METRICS_CSV: &str = "metrics.csv";

/// Runs all `T` rounds into `run_dir` and writes the manifest last. A round
/// that aborts on a numerical failure ends the run; its partial artifacts are
/// kept and listed.
pub fn run_evolution(
    config: &RunConfig,
    backend: Backend<'_>,
    run_dir: &Path,
) -> Result<EvolutionOutcome> {
    config.validate()?;
    create_dir(run_dir)?;
    let seeds = SeedDerivation::new(config.master_seed);
    let mut state = EvolutionState::initial(config)?;
    write_file(&run_dir.join("corpus.jsonl"), |out| {
        state.corpus.write_jsonl(out)
    })?;
    write_file(&run_dir.join("holdout.jsonl"), |out| {
        state.holdout.write_jsonl(out)
    })?;

    let base_dir = run_dir.join("round_0");
    let baseline = evaluate_policy(
        backend,
        &state.params,
        &state.holdout,
        0,
        config.evolution.sampling_k(),
        round_seeds(config, 0).seed("eval"),
    )?;
    write_json(&base_dir.join("metrics.json"), &baseline)?;
    let snap = PolicySnapshot::new(SnapshotRole::Reference, "round0", &state.params);
    write_file(&base_dir.join("checkpoint.json"), |out| {
        snap.write_checkpoint(out)
    })?;

    let mut rounds = Vec::new();
    for t in 1..=config.evolution.rounds {
        let art = run_round(
            &mut state,
            t,
            config,
            backend,
            &run_dir.join(format!("round_{t}")),
        )?;
        let stop = art.aborted.is_some();
        rounds.push(art);
        if stop {
            break;
        }
    }

    let mut all_metrics = vec![baseline.clone()];
    all_metrics.extend(rounds.iter().map(|r| r.metrics.clone()));
    write_file(&run_dir.join(METRICS_CSV), |out| {
        write_metrics_csv(out, &all_metrics)
    })?;

    let mut seed_table = BTreeMap::new();
    for label in ["world/train", "world/holdout", "policy/init"] {
        seed_table.insert(label.to_owned(), seeds.seed(label));
    }
    for t in 1..=config.evolution.rounds {
        seed_table.insert(format!("round/{t}"), seeds.seed(&format!("round/{t}")));
    }
    let manifest = Manifest {
        config,
        master_seed: config.master_seed,
        seeds: seed_table,
        rounds: rounds
            .iter()
            .map(|r| ManifestRound {
                round: r.round,
                steps: r.steps,
                aborted: r.aborted.clone(),
                wavg_plcc: r.metrics.wavg_plcc,
                wavg_srcc: r.metrics.wavg_srcc,
            })
            .collect(),
        artifacts: digest_tree(run_dir, &[MANIFEST])?,
    };
    write_json(&run_dir.join(MANIFEST), &manifest)?;

    Ok(EvolutionOutcome {
        run_dir: run_dir.to_path_buf(),
        baseline,
        rounds,
        final_params: state.params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimate_reward_cases() {
        assert_eq!(tolerance_reward(3.0, 3.0, 0.35), 1.0);
        assert_eq!(tolerance_reward(3.35, 3.0, 0.35), 1.0);
        assert_eq!(tolerance_reward(2.65, 3.0, 0.35), 1.0);
        assert_eq!(tolerance_reward(3.36, 3.0, 0.35), 0.0);
        assert_eq!(tolerance_reward(1.0, 5.0, 0.35), 0.0);
    }

    #[test]
    fn config_validation_names_fields() {
        let mut c = EvolutionConfig {
            k: 0,
            ..Default::default()
        };
        assert!(
            matches!(c.validate(), Err(EvoqError::Config { field, .. }) if field == "evolution.K")
        );
        c.k = 32;
        c.batches = 10_000;
        assert!(
            matches!(c.validate(), Err(EvoqError::Config { field, .. }) if field == "evolution.M")
        );
    }

    #[test]
    fn regimes_extend_past_the_list() {
        let c = EvolutionConfig::default();
        assert_eq!(c.regime(1).population, Population::References);
        assert_eq!(c.regime(2).pair_mode, PairMode::SameReference);
        assert_eq!(c.regime(5).pair_mode, PairMode::SameReference);
    }

    #[test]
    fn swapped_terms_cover_both_images() {
        let labels = vec![
            PseudoLabel {
                pair: (0, 1),
                p_star: 1.0,
            },
            PseudoLabel {
                pair: (2, 0),
                p_star: 0.5,
            },
            PseudoLabel {
                pair: (0, 1),
                p_star: 0.0,
            },
        ];
        let t = pairwise_terms(&labels);
        assert_eq!(t[&0], vec![(1, 1.0), (2, 0.5), (1, 0.0)]);
        assert_eq!(t[&1], vec![(0, 0.0), (0, 1.0)]);
        assert_eq!(t[&2], vec![(0, 0.5)]);
    }

    #[test]
    fn batches_are_within_range_and_distinct() {
        let b = draw_batches(50, 20, 4, 9);
        assert_eq!(b.len(), 20);
        for batch in &b {
            assert_eq!(batch.len(), 4);
            let set: BTreeSet<_> = batch.iter().collect();
            assert_eq!(set.len(), 4);
            assert!(batch.iter().all(|&i| i < 50));
        }
        assert_eq!(b, draw_batches(50, 20, 4, 9));
    }

    #[test]
    fn uniform_policy_pseudo_mos_is_mid_scale() {
        use crate::policy::QualityScale;
        let p = PolicyParams::zeros(QualityScale::default(), 2);
        let policy = BuiltinPolicy::new(PolicySnapshot::new(SnapshotRole::Current, "t", &p));
        let img = LatentImage {
            id: 0,
            true_quality: 2.0,
            reference_id: None,
            distortion_type: None,
            severity: None,
            features: vec![0.1, 0.2],
        };
        let k = 20_000;
        let mos = estimate_pseudo_scores(&policy, &[&img], k, 4).unwrap()[&0];
        // uniform over 17 centers on [1, 5]: mean 3, variance 1.5
        assert!((mos - 3.0).abs() <= 3.0 * (1.5 / k as f64).sqrt(), "{mos}");

        let mut point = p.clone();
        point.biases[8] = 60.0;
        let policy = BuiltinPolicy::new(PolicySnapshot::new(SnapshotRole::Current, "t", &point));
        assert_eq!(
            estimate_pseudo_scores(&policy, &[&img], 32, 4).unwrap()[&0],
            3.0
        );
    }
}
