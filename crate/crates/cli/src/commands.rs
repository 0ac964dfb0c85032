use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use evoq_core::artifacts::{create_dir, read_json, write_file, write_json};
use evoq_core::bridge::{serve_policy_over_bridge, RemotePolicy, DEFAULT_TIMEOUT};
use evoq_core::config::BackendSpec;
use evoq_core::eval::{render_report, RoundMetrics};
use evoq_core::evolution::{
    evaluate_policy, round_pairs, round_seeds, run_round, Backend, EvolutionState,
};
use evoq_core::policy::{BuiltinPolicy, PolicyBackend, PolicySnapshot, SnapshotRole};
use evoq_core::voting::run_offline_stage;
use evoq_core::{EvolutionMode, PolicyParams, RunConfig};

use crate::{CommonArgs, ModeArg};

/// Config file (or defaults), then environment overrides, then flags.
fn resolve_config(args: &CommonArgs) -> Result<RunConfig> {
    let base = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            RunConfig::from_toml_str(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    let mut c = base.with_overrides(std::env::vars())?;
    if let Some(seed) = args.seed {
        c.master_seed = seed;
    }
    if let Some(dir) = &args.output {
        c.output_dir = dir.clone();
    }
    if let Some(scale) = args.desk_scale {
        c.evolution.desk_scale = scale;
    }
    if let Some(mode) = args.mode {
        c.evolution.mode = match mode {
            ModeArg::Quality => EvolutionMode::Quality,
            ModeArg::Estimate => EvolutionMode::Estimate,
        };
    }
    if let Some(backend) = &args.backend {
        c.backend = backend.clone();
    }
    c.validate()?;
    Ok(c)
}

fn load_params(config: &RunConfig, checkpoint: Option<&Path>) -> Result<PolicyParams> {
    match checkpoint {
        Some(path) => {
            let file =
                std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let snap = PolicySnapshot::read_checkpoint(BufReader::new(file))
                .with_context(|| format!("reading checkpoint {}", path.display()))?;
            Ok(snap.params)
        }
        None => Ok(config.initial_params()?),
    }
}

/// A connected remote policy when the backend is a bridge.
fn connect(config: &RunConfig) -> Result<Option<RemotePolicy>> {
    let (scale, k) = (config.scale(), config.evolution.k);
    Ok(match config.backend_spec()? {
        BackendSpec::Builtin => None,
        BackendSpec::UnixSocket(path) => Some(
            RemotePolicy::connect_unix(&path, scale, k, DEFAULT_TIMEOUT)
                .with_context(|| format!("connecting to {}", path.display()))?,
        ),
        BackendSpec::Command(cmd) => Some(
            RemotePolicy::spawn(&cmd, scale, k, DEFAULT_TIMEOUT)
                .with_context(|| format!("starting bridge peer `{cmd}`"))?,
        ),
    })
}

fn finish(remote: Option<RemotePolicy>) -> Result<()> {
    if let Some(r) = remote {
        r.shutdown().context("bridge shutdown")?;
    }
    Ok(())
}

fn backend_of(remote: &Option<RemotePolicy>) -> Backend<'_> {
    match remote {
        Some(r) => Backend::External(r),
        None => Backend::Builtin,
    }
}

pub fn world_gen(args: &CommonArgs) -> Result<()> {
    let c = resolve_config(args)?;
    let state = EvolutionState::initial(&c)?;
    create_dir(&c.output_dir)?;
    let corpus_path = c.output_dir.join("corpus.jsonl");
    let holdout_path = c.output_dir.join("holdout.jsonl");
    write_file(&corpus_path, |out| state.corpus.write_jsonl(out))?;
    write_file(&holdout_path, |out| state.holdout.write_jsonl(out))?;
    println!(
        "{} images ({} references) -> {}",
        state.corpus.len(),
        state.corpus.reference_ids().len(),
        corpus_path.display()
    );
    println!(
        "{} holdout images -> {}",
        state.holdout.len(),
        holdout_path.display()
    );
    Ok(())
}

pub fn vote(args: &CommonArgs, round: usize, checkpoint: Option<&Path>) -> Result<()> {
    let c = resolve_config(args)?;
    if round == 0 {
        bail!("--round must be at least 1");
    }
    let state = EvolutionState::initial(&c)?;
    let params = load_params(&c, checkpoint)?;
    let seeds = round_seeds(&c, round);
    let pairs = round_pairs(&c, &state.corpus, round, seeds.seed("pairs"))?;
    let remote = connect(&c)?;
    let builtin = BuiltinPolicy::new(PolicySnapshot::new(
        SnapshotRole::Current,
        format!("round{round}/vote"),
        &params,
    ))
    .with_position_bias(c.evolution.position_bias);
    let backend: &dyn PolicyBackend = match &remote {
        Some(r) => r,
        None => &builtin,
    };
    let outcome = run_offline_stage(
        backend,
        &state.corpus,
        &pairs,
        c.evolution.k,
        c.evolution.permute_order,
        seeds.seed("vote"),
    )?;
    finish(remote)?;

    let dir = &c.output_dir;
    write_file(&dir.join("pairs.jsonl"), |out| pairs.write_jsonl(out))?;
    write_file(&dir.join("votes.jsonl"), |out| outcome.write_vote_log(out))?;
    write_file(&dir.join("pseudo_labels.jsonl"), |out| {
        outcome.write_labels(out)
    })?;
    let ties = outcome.labels.iter().filter(|l| l.p_star == 0.5).count();
    println!(
        "{} pairs voted with K={} ({ties} ties) -> {}",
        outcome.labels.len(),
        c.evolution.k,
        dir.join("pseudo_labels.jsonl").display()
    );
    Ok(())
}

pub fn train(args: &CommonArgs, round: usize, checkpoint: Option<&Path>) -> Result<()> {
    let c = resolve_config(args)?;
    if round == 0 {
        bail!("--round must be at least 1");
    }
    let mut state = EvolutionState::initial(&c)?;
    state.params = load_params(&c, checkpoint)?;
    let remote = connect(&c)?;
    let dir = c.output_dir.join(format!("round_{round}"));
    let art = run_round(&mut state, round, &c, backend_of(&remote), &dir)?;
    finish(remote)?;
    println!(
        "round {round}: {} steps, weighted SRCC {:.4} -> {}",
        art.steps,
        art.metrics.wavg_srcc,
        art.checkpoint.display()
    );
    if let Some(reason) = art.aborted {
        bail!("round {round} stopped early: {reason}");
    }
    Ok(())
}

pub fn evolve(args: &CommonArgs) -> Result<()> {
    let c = resolve_config(args)?;
    let run_dir = c.run_dir()?;
    let remote = connect(&c)?;
    let out = evoq_core::run_evolution(&c, backend_of(&remote), &run_dir)?;
    finish(remote)?;
    let mut rounds = vec![out.baseline.clone()];
    rounds.extend(out.rounds.iter().map(|r| r.metrics.clone()));
    print!("{}", render_report(&rounds));
    println!("run directory: {}", run_dir.display());
    if let Some(reason) = out.rounds.iter().find_map(|r| r.aborted.clone()) {
        bail!("run stopped early: {reason}");
    }
    Ok(())
}

pub fn eval(args: &CommonArgs, checkpoint: Option<&Path>) -> Result<()> {
    let c = resolve_config(args)?;
    let state = EvolutionState::initial(&c)?;
    let params = load_params(&c, checkpoint)?;
    let metrics = evaluate_policy(
        Backend::Builtin,
        &params,
        &state.holdout,
        0,
        c.evolution.sampling_k(),
        round_seeds(&c, 0).seed("eval"),
    )?;
    let path = c.output_dir.join("metrics.json");
    write_json(&path, &metrics)?;
    for d in &metrics.datasets {
        println!(
            "{:<20} n={:<5} PLCC {:.4}  SRCC {:.4}",
            d.name, d.n, d.plcc, d.srcc
        );
    }
    println!(
        "{:<20} {:<7} PLCC {:.4}  SRCC {:.4}",
        "WAVG.", "", metrics.wavg_plcc, metrics.wavg_srcc
    );
    Ok(())
}

fn round_dirs(run_dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut dirs = Vec::new();
    let entries =
        std::fs::read_dir(run_dir).with_context(|| format!("reading {}", run_dir.display()))?;
    for entry in entries {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(t) = name.strip_prefix("round_").and_then(|t| t.parse().ok()) {
            if path.join("metrics.json").is_file() {
                dirs.push((t, path));
            }
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn report(run_dir: &Path) -> Result<()> {
    let dirs = round_dirs(run_dir)?;
    if dirs.is_empty() {
        bail!("no round_<t>/metrics.json under {}", run_dir.display());
    }
    let rounds: Vec<RoundMetrics> = dirs
        .iter()
        .map(|(_, d)| read_json(&d.join("metrics.json")))
        .collect::<evoq_core::Result<_>>()?;
    print!("{}", render_report(&rounds));
    Ok(())
}

pub fn serve_bridge(
    args: &CommonArgs,
    socket: Option<&Path>,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let c = resolve_config(args)?;
    let params = load_params(&c, checkpoint)?;
    let policy = BuiltinPolicy::new(PolicySnapshot::new(
        SnapshotRole::Current,
        "served",
        &params,
    ))
    .with_position_bias(c.evolution.position_bias);
    let summary = match socket {
        Some(path) => {
            let listener = std::os::unix::net::UnixListener::bind(path)
                .with_context(|| format!("binding {}", path.display()))?;
            eprintln!("listening on {}", path.display());
            let (stream, _) = listener.accept()?;
            let reader = BufReader::new(stream.try_clone()?);
            let summary = serve_policy_over_bridge(reader, stream, &policy);
            let _ = std::fs::remove_file(path);
            summary?
        }
        None => {
            let stdin = std::io::stdin().lock();
            let stdout = std::io::stdout().lock();
            serve_policy_over_bridge(stdin, stdout, &policy)?
        }
    };
    let mut err = std::io::stderr().lock();
    writeln!(
        err,
        "served {} compare and {} score requests, {} advantage exports, {} errors",
        summary.compare_requests, summary.score_requests, summary.advantage_exports, summary.errors
    )?;
    if !summary.clean_shutdown {
        bail!("peer closed the session without shutdown");
    }
    Ok(())
}

pub fn ablate_k(args: &CommonArgs, ks: &[usize]) -> Result<()> {
    let c = resolve_config(args)?;
    if c.backend_spec()? != BackendSpec::Builtin {
        bail!("ablate-k runs with the builtin backend only");
    }
    let dir = c.output_dir.join(format!("ablate_k_{}", c.run_id()?));
    let entries = evoq_core::ablation::ablate_k(&c, ks, &dir)?;
    print!("{}", evoq_core::ablation::render_sweep(&entries));
    println!("sweep directory: {}", dir.display());
    Ok(())
}
