//! Correlation metrics against latent truth and per-round reports.
//!
//! PLCC is raw Pearson correlation (no logistic remapping). SRCC is Pearson
//! correlation of midranks.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{EvoqError, Result};
use crate::policy::{expected_score, sample_scores, score_distribution, PolicyParams};
use crate::world::LatentImage;

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(EvoqError::Shape {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(EvoqError::UndefinedCorrelation("need at least two points"));
    }
    Ok(())
}

pub fn plcc(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    check_lengths(predictions, truths)?;
    let n = predictions.len() as f64;
    let mx = predictions.iter().sum::<f64>() / n;
    let my = truths.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in predictions.iter().zip(truths) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvoqError::UndefinedCorrelation("constant input"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing the average of the positions they span.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1 ..= end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

pub fn srcc(predictions: &[f64], truths: &[f64]) -> Result<f64> {
    check_lengths(predictions, truths)?;
    plcc(&midranks(predictions), &midranks(truths))
        .map_err(|_| EvoqError::UndefinedCorrelation("all-tied input"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub n: usize,
    pub plcc: f64,
    pub srcc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Plcc,
    Srcc,
}

/// `Σ metric·n / Σ n`.
pub fn weighted_average(reports: &[MetricReport], metric: Metric) -> Result<f64> {
    if reports.is_empty() {
        return Err(EvoqError::UndefinedCorrelation("no reports to average"));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for r in reports {
        if r.n == 0 {
            return Err(EvoqError::UndefinedCorrelation("report with zero images"));
        }
        let v = match metric {
            Metric::Plcc => r.plcc,
            Metric::Srcc => r.srcc,
        };
        num += v * r.n as f64;
        den += r.n as f64;
    }
    Ok(num / den)
}

/// How a scalar quality estimate is read off the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMode {
    /// Exact distribution mean.
    Mean,
    /// Center of the most probable bin.
    ModeBin,
    /// Mean of `K` sampled scores.
    SampleMean,
}

pub fn policy_quality_estimate(
    params: &PolicyParams,
    image: &LatentImage,
    mode: EstimateMode,
    k: usize,
    seed: u64,
) -> Result<f64> {
    match mode {
        EstimateMode::Mean => expected_score(params, &image.features),
        EstimateMode::ModeBin => {
            let probs = score_distribution(params, &image.features)?;
            let best = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(b, _)| b)
                .unwrap_or(0);
            Ok(params.scale.center(best))
        }
        EstimateMode::SampleMean => {
            let samples = sample_scores(params, &image.features, k, seed, "eval")?;
            Ok(samples.iter().map(|s| s.score).sum::<f64>() / samples.len() as f64)
        }
    }
}

/// Scores `images` with `estimate` and correlates against latent truth.
pub fn evaluate_dataset<F>(
    name: &str,
    images: &[&LatentImage],
    mut estimate: F,
) -> Result<MetricReport>
where
    F: FnMut(&LatentImage) -> Result<f64>,
{
    let mut preds = Vec::with_capacity(images.len());
    let mut truths = Vec::with_capacity(images.len());
    for im in images {
        preds.push(estimate(im)?);
        truths.push(im.true_quality);
    }
    Ok(MetricReport {
        name: name.to_owned(),
        n: images.len(),
        plcc: plcc(&preds, &truths)?,
        srcc: srcc(&preds, &truths)?,
    })
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub datasets: Vec<MetricReport>,
    pub wavg_plcc: f64,
    pub wavg_srcc: f64,
}

impl RoundMetrics {
    pub fn dataset(&self, name: &str) -> Option<&MetricReport> {
        self.datasets.iter().find(|d| d.name == name)
    }

    pub fn new(round: usize, datasets: Vec<MetricReport>) -> Result<Self> {
        let wavg_plcc = weighted_average(&datasets, Metric::Plcc)?;
        let wavg_srcc = weighted_average(&datasets, Metric::Srcc)?;
        Ok(Self {
            round,
            datasets,
            wavg_plcc,
            wavg_srcc,
        })
    }
}

pub const METRICS_CSV_HEADER: &str = "round,dataset,n,plcc,srcc";

/// One line per (round, dataset) plus a `wavg` line per round.
pub fn write_metrics_csv<W: std::io::Write>(out: &mut W, rounds: &[RoundMetrics]) -> Result<()> {
    writeln!(out, "{METRICS_CSV_HEADER}")?;
    for r in rounds {
        let mut n_total = 0;
        for d in &r.datasets {
            writeln!(out, "{},{},{},{},{}", r.round, d.name, d.n, d.plcc, d.srcc)?;
            n_total += d.n;
        }
        writeln!(
            out,
            "{},wavg,{},{},{}",
            r.round, n_total, r.wavg_plcc, r.wavg_srcc
        )?;
    }
    Ok(())
}

fn delta_pct(value: f64, base: f64) -> String {
    if base.abs() < 1e-12 {
        return "   n/a".into();
    }
    format!("{:+6.1}%", 100.0 * (value - base) / base.abs())
}

/// Plain-text table: one row per dataset plus the weighted average, one
/// PLCC/SRCC column pair per round, with percentage change over round 0.
pub fn render_report(rounds: &[RoundMetrics]) -> String {
    let mut out = String::new();
    let Some(base) = rounds.first() else {
        return "no rounds\n".into();
    };
    let _ = write!(out, "{:<20}", "Dataset");
    for r in rounds {
        let label = if r.round == 0 {
            "Round0 (baseline)".to_owned()
        } else {
            format!("Round{}", r.round)
        };
        let width = if r.round == 0 { 16 } else { 32 };
        let _ = write!(out, " | {label:<width$}");
    }
    out.push('\n');
    let _ = write!(out, "{:<20}", "");
    for r in rounds {
        if r.round == 0 {
            let _ = write!(out, " | {:>7} {:>8}", "PLCC", "SRCC");
        } else {
            let _ = write!(out, " | {:>15} {:>16}", "PLCC (Δ%)", "SRCC (Δ%)");
        }
    }
    out.push('\n');
    let _ = writeln!(out, "{}", "-".repeat(20 + rounds.len() * 35));

    let mut row = |name: &str, pick: &dyn Fn(&RoundMetrics) -> Option<(f64, f64)>| {
        let _ = write!(out, "{name:<20}");
        let b = pick(base);
        for r in rounds {
            match (pick(r), b) {
                (Some((p, s)), Some((bp, bs))) if r.round != 0 => {
                    let _ = write!(
                        out,
                        " | {:>7.3} {} {:>7.3} {}",
                        p,
                        delta_pct(p, bp),
                        s,
                        delta_pct(s, bs)
                    );
                }
                (Some((p, s)), _) => {
                    let _ = write!(out, " | {:>7.3} {:>8.3}", p, s);
                }
                (None, _) => {
                    let _ = write!(out, " | {:>16}", "-");
                }
            }
        }
        out.push('\n');
    };
    for d in &base.datasets {
        let name = d.name.clone();
        row(&name, &|r: &RoundMetrics| {
            r.datasets
                .iter()
                .find(|x| x.name == name)
                .map(|x| (x.plcc, x.srcc))
        });
    }
    row("WAVG.", &|r: &RoundMetrics| {
        Some((r.wavg_plcc, r.wavg_srcc))
    });
    out
}
