use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "\
[evolution]
desk_scale = 0.01
K = 8
M = 10
holdout_references = 20
";

fn evoq() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_evoq"));
    // keep the caller's EVOQ_* variables out of the runs
    for (k, _) in std::env::vars() {
        if k.starts_with("EVOQ_") {
            c.env_remove(k);
        }
    }
    c
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, SMALL).unwrap();
    (dir, cfg)
}

fn run(args: &[&str]) -> Output {
    evoq().args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn single_run_dir(root: &Path) -> PathBuf {
    let runs: Vec<PathBuf> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("run_"))
        .collect();
    assert_eq!(runs.len(), 1, "{runs:?}");
    runs.into_iter().next().unwrap()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["evolve", "--mode", "psychic"]).status.code(), Some(2));
}

#[test]
fn invalid_config_names_the_field() {
    let (dir, _) = setup();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[evolution]\nK = 0\n").unwrap();
    let out = run(&["--config", s(&bad), "world-gen"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("evolution.K"));

    fs::write(&bad, "[grpo]\nclip = 0.3\n").unwrap();
    let out = run(&["--config", s(&bad), "world-gen"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn evolve_twice_gives_identical_manifests() {
    let (dir, cfg) = setup();
    let out_dir = dir.path().join("o");
    // same output path both times since the manifest records it
    let digests = || {
        let _ = fs::remove_dir_all(&out_dir);
        ok(&run(&[
            "--config",
            s(&cfg),
            "--seed",
            "7",
            "--output",
            s(&out_dir),
            "evolve",
        ]));
        let run_dir = single_run_dir(&out_dir);
        (
            fs::read(run_dir.join("manifest.json")).unwrap(),
            fs::read(run_dir.join("metrics.csv")).unwrap(),
        )
    };
    assert_eq!(digests(), digests());

    let manifest: serde_json::Value = serde_json::from_slice(&digests().0).unwrap();
    assert_eq!(manifest["master_seed"], 7);
    assert!(manifest["artifacts"]["round_2/checkpoint.json"].is_string());
}

#[test]
fn report_lists_rounds_with_deltas() {
    let (dir, cfg) = setup();
    let out_dir = dir.path().join("o");
    ok(&run(&[
        "--config",
        s(&cfg),
        "--output",
        s(&out_dir),
        "evolve",
    ]));
    let table = ok(&run(&["report", s(&single_run_dir(&out_dir))]));
    assert!(table.contains("Round0 (baseline)"));
    assert!(table.contains("Round1") && table.contains("Round2"));
    assert!(table.contains("WAVG."));
    assert!(table.contains('%'));

    let out = run(&["report", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablate_k_writes_one_metrics_file_per_k() {
    let (dir, cfg) = setup();
    let out_dir = dir.path().join("o");
    let table = ok(&run(&[
        "--config",
        s(&cfg),
        "--output",
        s(&out_dir),
        "ablate-k",
    ]));
    let sweep = fs::read_dir(&out_dir)
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    for k in [1, 8, 16, 32] {
        assert!(sweep.join(format!("k_{k}/metrics.json")).is_file(), "K={k}");
        assert!(table
            .lines()
            .any(|l| l.trim_start().starts_with(&format!("{k} |"))));
    }
}

#[test]
fn staged_commands_chain() {
    let (dir, cfg) = setup();
    let o = dir.path().join("o");
    let with = |extra: &[&str]| {
        let mut v = vec!["--config", s(&cfg), "--output", s(&o)];
        v.extend_from_slice(extra);
        run(&v)
    };

    ok(&with(&["world-gen"]));
    assert!(o.join("corpus.jsonl").is_file() && o.join("holdout.jsonl").is_file());

    ok(&with(&["vote"]));
    let labels = fs::read_to_string(o.join("pseudo_labels.jsonl")).unwrap();
    assert_eq!(labels.lines().count(), 200);

    ok(&with(&["train", "--round", "1"]));
    let ckpt = o.join("round_1/checkpoint.json");
    assert!(ckpt.is_file());

    let printed = ok(&with(&["eval", "--checkpoint", s(&ckpt)]));
    assert!(printed.contains("holdout_authentic"));
    assert!(o.join("metrics.json").is_file());

    let out = with(&["train", "--round", "0"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn flags_override_config() {
    let (dir, cfg) = setup();
    let o = dir.path().join("o");
    ok(&run(&[
        "--config",
        s(&cfg),
        "--output",
        s(&o),
        "--desk-scale",
        "0.005",
        "--mode",
        "estimate",
        "--seed",
        "3",
        "evolve",
    ]));
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(single_run_dir(&o).join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["evolution"]["desk_scale"], 0.005);
    assert_eq!(manifest["config"]["evolution"]["mode"], "estimate");
    assert_eq!(manifest["config"]["master_seed"], 3);
}

#[test]
fn evolve_through_a_spawned_bridge_peer() {
    let (dir, cfg) = setup();
    let (direct, bridged) = (dir.path().join("direct"), dir.path().join("bridged"));
    ok(&run(&[
        "--config",
        s(&cfg),
        "--output",
        s(&direct),
        "evolve",
    ]));
    let peer = format!(
        "bridge:cmd:{} --config {} serve-bridge",
        env!("CARGO_BIN_EXE_evoq"),
        s(&cfg)
    );
    let out = run(&[
        "--config",
        s(&cfg),
        "--output",
        s(&bridged),
        "--backend",
        &peer,
        "evolve",
    ]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("advantage exports"));
    let votes = |root: &Path| fs::read(single_run_dir(root).join("round_1/votes.jsonl")).unwrap();
    assert_eq!(votes(&bridged), votes(&direct));
}

#[test]
fn serve_bridge_over_stdio() {
    use std::io::Write;
    let mut child = evoq()
        .arg("serve-bridge")
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let handshake = evoq_core::bridge::BridgeMessage::Handshake {
        id: 0,
        protocol_version: 1,
        prompts: Default::default(),
        budget_k: 32,
        score_scale: evoq_core::bridge::ScoreScale {
            min: 1.0,
            max: 5.0,
            n_bins: 17,
        },
    };
    let mut stdin = child.stdin.take().unwrap();
    stdin
        .write_all(handshake.to_line().unwrap().as_bytes())
        .unwrap();
    stdin.write_all(b"not json\n").unwrap();
    stdin
        .write_all(b"{\"kind\":\"shutdown\",\"id\":1}\n")
        .unwrap();
    drop(stdin);
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let lines: Vec<&str> = std::str::from_utf8(&out.stdout).unwrap().lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].contains("\"handshake_ack\""));
    assert!(lines[1].contains("\"error\""));
    assert!(lines[2].contains("\"ack\""));
}
