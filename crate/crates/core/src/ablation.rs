//! Voting-budget sweep: the same world and seed evolved once per `K`.
//!
//! Only the offline voting budget changes between runs. The online sampling
//! group size is pinned to the base config's value so the sweep isolates the
//! effect of the vote count.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::artifacts::{write_file, write_json};
use crate::config::RunConfig;
use crate::error::{EvoqError, Result};
use crate::eval::RoundMetrics;
use crate::evolution::{run_evolution, Backend};

pub const DEFAULT_KS: [usize; 4] = [1, 8, 16, 32];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub k: usize,
    pub run_dir: PathBuf,
    /// Metrics after the last completed round.
    pub metrics: RoundMetrics,
    pub baseline: RoundMetrics,
}

/// Runs one full evolution per `K` under `out_dir/k_<K>` and writes each
/// final `metrics.json` next to it, plus `ablate_k.csv` and `ablate_k.txt`.
pub fn ablate_k(config: &RunConfig, ks: &[usize], out_dir: &Path) -> Result<Vec<SweepEntry>> {
    if ks.is_empty() {
        return Err(EvoqError::config("ablate_k.ks", "needs at least one K"));
    }
    let sample_k = config.evolution.sampling_k();
    let mut entries = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut c = config.clone();
        c.evolution.k = k;
        c.evolution.sample_k = Some(sample_k);
        let dir = out_dir.join(format!("k_{k}"));
        let out = run_evolution(&c, Backend::Builtin, &dir)?;
        let metrics = out
            .rounds
            .last()
            .map(|r| r.metrics.clone())
            .unwrap_or_else(|| out.baseline.clone());
        write_json(&dir.join("metrics.json"), &metrics)?;
        entries.push(SweepEntry {
            k,
            run_dir: dir,
            metrics,
            baseline: out.baseline,
        });
    }
    write_file(&out_dir.join("ablate_k.csv"), |out| {
        out.write_all(sweep_csv(&entries).as_bytes())?;
        Ok(())
    })?;
    write_file(&out_dir.join("ablate_k.txt"), |out| {
        out.write_all(render_sweep(&entries).as_bytes())?;
        Ok(())
    })?;
    Ok(entries)
}

pub fn sweep_csv(entries: &[SweepEntry]) -> String {
    let mut s = String::from("k,dataset,plcc,srcc\n");
    for e in entries {
        for d in &e.metrics.datasets {
            let _ = writeln!(s, "{},{},{},{}", e.k, d.name, d.plcc, d.srcc);
        }
        let _ = writeln!(
            s,
            "{},wavg,{},{}",
            e.k, e.metrics.wavg_plcc, e.metrics.wavg_srcc
        );
    }
    s
}

/// One row per `K`, final-round PLCC/SRCC per dataset and weighted average.
pub fn render_sweep(entries: &[SweepEntry]) -> String {
    let mut s = String::new();
    let Some(first) = entries.first() else {
        return s;
    };
    let _ = write!(s, "{:>4}", "K");
    for d in &first.metrics.datasets {
        let _ = write!(s, " | {:^17}", d.name);
    }
    let _ = writeln!(s, " | {:^17}", "WAVG.");
    let _ = write!(s, "{:>4}", "");
    for _ in 0..=first.metrics.datasets.len() {
        let _ = write!(s, " | {:>8} {:>8}", "PLCC", "SRCC");
    }
    s.push('\n');
    let _ = writeln!(
        s,
        "{}",
        "-".repeat(4 + 20 * (first.metrics.datasets.len() + 1))
    );
    for e in entries {
        let _ = write!(s, "{:>4}", e.k);
        for d in &e.metrics.datasets {
            let _ = write!(s, " | {:>8.4} {:>8.4}", d.plcc, d.srcc);
        }
        let _ = writeln!(
            s,
            " | {:>8.4} {:>8.4}",
            e.metrics.wavg_plcc, e.metrics.wavg_srcc
        );
    }
    s
}
