#![allow(dead_code)]

use std::io::BufReader;
use std::os::unix::net::UnixStream;
use std::thread::JoinHandle;

use evoq_core::bridge::{serve_policy_over_bridge, RemotePolicy, SessionSummary, DEFAULT_TIMEOUT};
use evoq_core::policy::{BuiltinPolicy, PolicySnapshot, SnapshotRole};
use evoq_core::{PolicyParams, Result};

/// An in-process policy served over a socket pair, plus the engine-side
/// client talking to it.
pub fn loopback(
    params: &PolicyParams,
    budget_k: usize,
) -> (RemotePolicy, JoinHandle<Result<SessionSummary>>) {
    let (engine, peer) = UnixStream::pair().unwrap();
    let policy = BuiltinPolicy::new(PolicySnapshot::new(SnapshotRole::Current, "peer", params));
    let server = std::thread::spawn(move || {
        let reader = BufReader::new(peer.try_clone().unwrap());
        serve_policy_over_bridge(reader, peer, &policy)
    });
    let reader = engine.try_clone().unwrap();
    let remote =
        RemotePolicy::connect(reader, engine, params.scale, budget_k, DEFAULT_TIMEOUT).unwrap();
    (remote, server)
}
