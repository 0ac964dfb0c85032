//! Offline stage: pairwise majority voting.
//!
//! Each pair gets `K` comparison queries. Before every query the presentation
//! order is flipped by a fair coin and the answer is mapped back to the
//! canonical `(i, j)` orientation, so a positional preference of the voter
//! cancels out in expectation. The tally becomes a pseudo-preference in
//! `{0, 0.5, 1}`.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EvoqError, Result};
use crate::policy::{ComparisonVote, PolicyBackend};
use crate::seed::{derive_seed, rng_from_seed};
use crate::world::{Corpus, ImageId, PairSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteTally {
    pub pair: (ImageId, ImageId),
    /// Votes for the first image of the pair.
    pub k_x: usize,
    /// Votes for the second image of the pair.
    pub k_y: usize,
    /// Queries whose presentation order was flipped.
    pub flips: usize,
    /// Queries whose answer could not be used.
    pub discarded: usize,
}

impl VoteTally {
    /// Effective budget: the number of usable votes.
    pub fn k(&self) -> usize {
        self.k_x + self.k_y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub pair: (ImageId, ImageId),
    pub p_star: f64,
}

impl PseudoLabel {
    /// The same judgement seen from the other image.
    pub fn swapped(&self) -> PseudoLabel {
        PseudoLabel {
            pair: (self.pair.1, self.pair.0),
            p_star: 1.0 - self.p_star,
        }
    }
}

/// One line of `votes.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub pair: [ImageId; 2],
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "K_x")]
    pub k_x: usize,
    #[serde(rename = "K_y")]
    pub k_y: usize,
    pub p_star: f64,
    pub flips: usize,
    pub discarded: usize,
}

impl VoteRecord {
    pub fn new(tally: &VoteTally, label: &PseudoLabel) -> Self {
        Self {
            pair: [tally.pair.0, tally.pair.1],
            k: tally.k(),
            k_x: tally.k_x,
            k_y: tally.k_y,
            p_star: label.p_star,
            flips: tally.flips,
            discarded: tally.discarded,
        }
    }
}

/// One line of `pseudo_labels.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub pair: [ImageId; 2],
    pub p_star: f64,
}

/// Runs `k` comparison queries on `(image_i, image_j)`.
///
/// The coin flips are drawn up front from `seed`; straight and flipped
/// presentations are then issued as two query groups with their own derived
/// seeds. This is the same law as flipping before each query, and it lets a
/// remote backend answer each group in one request.
pub fn vote_on_pair(
    backend: &dyn PolicyBackend,
    corpus: &Corpus,
    pair: (ImageId, ImageId),
    k: usize,
    permute: bool,
    seed: u64,
) -> Result<VoteTally> {
    if k == 0 {
        return Err(EvoqError::EmptyBudget);
    }
    let (i, j) = pair;
    let (image_i, image_j) = (corpus.get(i)?, corpus.get(j)?);
    let flips = if permute {
        let mut rng = rng_from_seed(derive_seed(seed, "flips"));
        (0..k).filter(|_| rng.random::<bool>()).count()
    } else {
        0
    };
    let straight = k - flips;

    let mut tally = VoteTally {
        pair,
        k_x: 0,
        k_y: 0,
        flips,
        discarded: 0,
    };
    if straight > 0 {
        for vote in
            backend.compare_many(image_i, image_j, straight, derive_seed(seed, "straight"))?
        {
            match vote {
                Some(ComparisonVote::First) => tally.k_x += 1,
                Some(ComparisonVote::Second) => tally.k_y += 1,
                None => tally.discarded += 1,
            }
        }
    }
    if flips > 0 {
        for vote in backend.compare_many(image_j, image_i, flips, derive_seed(seed, "flipped"))? {
            match vote {
                Some(ComparisonVote::First) => tally.k_y += 1,
                Some(ComparisonVote::Second) => tally.k_x += 1,
                None => tally.discarded += 1,
            }
        }
    }
    Ok(tally)
}

/// Majority rule: 1 if the first image won more votes, 0 if the second did,
/// 0.5 on a tie (including the degenerate all-discarded tally).
pub fn tally_to_label(tally: &VoteTally) -> PseudoLabel {
    let p_star = match tally.k_x.cmp(&tally.k_y) {
        std::cmp::Ordering::Greater => 1.0,
        std::cmp::Ordering::Equal => 0.5,
        std::cmp::Ordering::Less => 0.0,
    };
    PseudoLabel {
        pair: tally.pair,
        p_star,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineOutcome {
    pub tallies: Vec<VoteTally>,
    pub labels: Vec<PseudoLabel>,
}

impl OfflineOutcome {
    pub fn vote_records(&self) -> impl Iterator<Item = VoteRecord> + '_ {
        self.tallies
            .iter()
            .zip(&self.labels)
            .map(|(t, l)| VoteRecord::new(t, l))
    }

    pub fn write_vote_log<W: Write>(&self, mut out: W) -> Result<()> {
        for rec in self.vote_records() {
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_labels<W: Write>(&self, mut out: W) -> Result<()> {
        for l in &self.labels {
            let rec = LabelRecord {
                pair: [l.pair.0, l.pair.1],
                p_star: l.p_star,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn read_labels<R: std::io::BufRead>(input: R) -> Result<Vec<PseudoLabel>> {
    let mut labels = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(&line)?;
        if ![0.0, 0.5, 1.0].contains(&rec.p_star) {
            return Err(EvoqError::Numerical(format!(
                "pseudo-label {} outside {{0, 0.5, 1}}",
                rec.p_star
            )));
        }
        labels.push(PseudoLabel {
            pair: (rec.pair[0], rec.pair[1]),
            p_star: rec.p_star,
        });
    }
    Ok(labels)
}

/// Votes on every pair of the set. Pair `n` uses the seed derived from
/// `"vote/pair/<n>"`, so the output does not depend on scheduling.
pub fn run_offline_stage(
    backend: &dyn PolicyBackend,
    corpus: &Corpus,
    pairset: &PairSet,
    k: usize,
    permute: bool,
    seed: u64,
) -> Result<OfflineOutcome> {
    if pairset.is_empty() {
        return Err(EvoqError::InfeasibleSampling(
            "offline stage needs a nonempty pair set".into(),
        ));
    }
    let tallies = pairset
        .pairs
        .par_iter()
        .enumerate()
        .map(|(n, &pair)| {
            vote_on_pair(
                backend,
                corpus,
                pair,
                k,
                permute,
                derive_seed(seed, &format!("vote/pair/{n}")),
            )
            .map_err(|e| EvoqError::PairVote {
                i: pair.0,
                j: pair.1,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let labels = tallies.iter().map(tally_to_label).collect();
    Ok(OfflineOutcome { tallies, labels })
}

/// Expected label credit when each of `k` independent votes picks the better
/// image with probability `q`: `P(majority right) + ½·P(tie)`.
pub fn majority_accuracy(k: usize, q: f64) -> f64 {
    if k == 0 {
        return 0.5;
    }
    let pmf = binomial_pmf(k, q);
    let mut acc = 0.0;
    for (m, p) in pmf.iter().enumerate() {
        if 2 * m > k {
            acc += p;
        } else if 2 * m == k {
            acc += 0.5 * p;
        }
    }
    acc
}

fn binomial_pmf(n: usize, q: f64) -> Vec<f64> {
    if q <= 0.0 {
        let mut v = vec![0.0; n + 1];
        v[0] = 1.0;
        return v;
    }
    if q >= 1.0 {
        let mut v = vec![0.0; n + 1];
        v[n] = 1.0;
        return v;
    }
    let mut v = Vec::with_capacity(n + 1);
    let mut p = (1.0 - q).powi(n as i32);
    for m in 0..=n {
        v.push(p);
        p *= (n - m) as f64 / (m + 1) as f64 * q / (1.0 - q);
    }
    v
}
