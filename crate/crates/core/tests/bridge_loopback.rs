mod common;

use std::fs;

use evoq_core::evolution::{run_evolution, Backend};
use evoq_core::policy::{BuiltinPolicy, PolicySnapshot, SnapshotRole};
use evoq_core::voting::run_offline_stage;
use evoq_core::world::{generate_corpus, sample_pairs};
use evoq_core::{PairMode, RunConfig, WorldConfig};

#[test]
fn offline_stage_vote_logs_are_byte_identical() {
    let c = RunConfig::default();
    let world = WorldConfig {
        n_references: 30,
        ..WorldConfig::default()
    };
    let corpus = generate_corpus(&world, 5).unwrap();
    let pairs = sample_pairs(&corpus, 300, PairMode::Unrestricted, 6).unwrap();
    let params = c.initial_params().unwrap();

    let direct = BuiltinPolicy::new(PolicySnapshot::new(SnapshotRole::Current, "d", &params));
    let mut expected = Vec::new();
    run_offline_stage(&direct, &corpus, &pairs, 32, true, 77)
        .unwrap()
        .write_vote_log(&mut expected)
        .unwrap();

    let (remote, server) = common::loopback(&params, 32);
    let mut got = Vec::new();
    run_offline_stage(&remote, &corpus, &pairs, 32, true, 77)
        .unwrap()
        .write_vote_log(&mut got)
        .unwrap();
    remote.shutdown().unwrap();
    let summary = server.join().unwrap().unwrap();

    // one request per presentation order; with K = 32 both orders occur
    // for essentially every pair
    assert!((300..=600).contains(&summary.compare_requests));
    assert!(summary.clean_shutdown);
    assert!(!expected.is_empty());
    assert_eq!(got, expected);
}

#[test]
fn evolution_through_bridge_exports_advantages() {
    let mut c = RunConfig {
        master_seed: 3,
        ..Default::default()
    };
    c.evolution.desk_scale = 0.01;
    c.evolution.k = 8;
    c.evolution.batches = 5;
    c.evolution.holdout_references = 10;
    let params = c.initial_params().unwrap();

    let direct = tempfile::tempdir().unwrap();
    run_evolution(&c, Backend::Builtin, direct.path()).unwrap();

    let bridged = tempfile::tempdir().unwrap();
    let (remote, server) = common::loopback(&params, c.evolution.k);
    let out = run_evolution(&c, Backend::External(&remote), bridged.path()).unwrap();
    remote.shutdown().unwrap();
    let summary = server.join().unwrap().unwrap();

    // the first round votes with the same policy on both paths
    let votes = |d: &std::path::Path| fs::read(d.join("round_1/votes.jsonl")).unwrap();
    assert_eq!(votes(bridged.path()), votes(direct.path()));

    // no engine-side optimizer step for an external peer
    assert_eq!(out.final_params, params);
    assert_eq!(summary.advantage_exports, 2 * c.evolution.batches);
    let log = fs::read_to_string(bridged.path().join("round_1/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + c.evolution.batches);
    assert!(log.lines().skip(1).all(|l| l.contains("NaN")));
}
