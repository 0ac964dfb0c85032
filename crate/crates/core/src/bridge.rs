//! Newline-delimited JSON protocol that lets another process act as the
//! policy.
//!
//! The engine side is [`RemotePolicy`], which implements [`PolicyBackend`]
//! and [`ExternalPolicy`]. The peer side is [`serve_policy_over_bridge`],
//! which answers requests from any in-process [`PolicyBackend`]. One request
//! is in flight per session; responses echo the request id.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::artifacts::sha256_hex;
use crate::error::{EvoqError, Result};
use crate::evolution::ExternalPolicy;
use crate::policy::{ComparisonVote, PolicyBackend, QualityScale, ScoreSample};
use crate::world::{ImageId, LatentImage};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);
pub const MAX_CONSECUTIVE_TIMEOUTS: u32 = 3;

pub const COMPARE_PROMPT: &str = "<image><image> You are performing an image quality assessment task. Compare the two images and decide which one has better perceptual quality. Answer strictly with the index of the better image: 0 if the first image is better, or 1 if the second image is better.";
pub const SCORE_PROMPT: &str = "<image> You are doing the image quality assessment task. Here is the question: What is your overall rating on the quality of this picture? The rating should be a float between 1 and 5, rounded to two decimal places, with 1 representing very poor quality and 5 representing excellent quality.";
pub const REASONING_SUFFIX: &str = "You FIRST think about the reasoning process as an internal monologue and then provide the final answer. The reasoning process MUST BE enclosed within <think> </think> tags. The final answer MUST BE put in boxed{}.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplates {
    pub compare_prompt: String,
    pub score_prompt: String,
    pub suffix: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            compare_prompt: COMPARE_PROMPT.to_owned(),
            score_prompt: SCORE_PROMPT.to_owned(),
            suffix: REASONING_SUFFIX.to_owned(),
        }
    }
}

impl PromptTemplates {
    pub fn validate(&self) -> Result<()> {
        if self.compare_prompt.is_empty() || self.score_prompt.is_empty() || self.suffix.is_empty()
        {
            return Err(EvoqError::Protocol(
                "prompt templates must be nonempty".into(),
            ));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        sha256_hex(
            format!(
                "{}\n{}\n{}",
                self.compare_prompt, self.score_prompt, self.suffix
            )
            .as_bytes(),
        )
    }
}

/// Corpus id plus either inline features or an opaque path for the peer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRef {
    pub id: ImageId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl ImageRef {
    pub fn of(image: &LatentImage) -> Self {
        Self {
            id: image.id,
            features: Some(image.features.clone()),
            path: None,
        }
    }

    /// A stand-in image for peers that only see features. Latent quality is
    /// unknown on this side and left as NaN.
    fn to_image(&self) -> Result<LatentImage> {
        let features = self
            .features
            .clone()
            .ok_or_else(|| EvoqError::Protocol(format!("image {} carries no features", self.id)))?;
        Ok(LatentImage {
            id: self.id,
            true_quality: f64::NAN,
            reference_id: None,
            distortion_type: None,
            severity: None,
            features,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreScale {
    pub min: f64,
    pub max: f64,
    pub n_bins: usize,
}

impl From<QualityScale> for ScoreScale {
    fn from(s: QualityScale) -> Self {
        Self {
            min: s.min_score,
            max: s.max_score,
            n_bins: s.n_bins,
        }
    }
}

impl From<ScoreScale> for QualityScale {
    fn from(s: ScoreScale) -> Self {
        QualityScale {
            min_score: s.min,
            max_score: s.max,
            n_bins: s.n_bins,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BridgeMessage {
    Handshake {
        id: u64,
        protocol_version: u32,
        prompts: PromptTemplates,
        budget_k: usize,
        score_scale: ScoreScale,
    },
    HandshakeAck {
        id: u64,
        protocol_version: u32,
        prompt_digest: String,
    },
    CompareRequest {
        id: u64,
        pair_id: u64,
        image_a: ImageRef,
        image_b: ImageRef,
        k: usize,
        seed: u64,
    },
    /// Votes are `0`, `1`, or anything else (typically `null`) for an
    /// answer that could not be parsed.
    CompareResponse {
        id: u64,
        votes: Vec<serde_json::Value>,
    },
    ScoreRequest {
        id: u64,
        image: ImageRef,
        k: usize,
        seed: u64,
    },
    ScoreResponse {
        id: u64,
        scores: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        log_probs: Option<Vec<f64>>,
    },
    AdvantageExport {
        id: u64,
        trajectory_ids: Vec<String>,
        advantages: Vec<f64>,
    },
    Ack {
        id: u64,
    },
    Error {
        #[serde(default)]
        id: Option<u64>,
        message: String,
    },
    Shutdown {
        id: u64,
    },
}

impl BridgeMessage {
    pub fn id(&self) -> Option<u64> {
        match self {
            BridgeMessage::Handshake { id, .. }
            | BridgeMessage::HandshakeAck { id, .. }
            | BridgeMessage::CompareRequest { id, .. }
            | BridgeMessage::CompareResponse { id, .. }
            | BridgeMessage::ScoreRequest { id, .. }
            | BridgeMessage::ScoreResponse { id, .. }
            | BridgeMessage::AdvantageExport { id, .. }
            | BridgeMessage::Ack { id }
            | BridgeMessage::Shutdown { id } => Some(*id),
            BridgeMessage::Error { id, .. } => *id,
        }
    }

    pub fn to_line(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line.trim_end_matches(['\n', '\r']))?)
    }
}

fn decode_vote(v: &serde_json::Value) -> Option<ComparisonVote> {
    v.as_u64()
        .and_then(|i| u8::try_from(i).ok())
        .and_then(ComparisonVote::from_index)
}

fn encode_vote(v: Option<ComparisonVote>) -> serde_json::Value {
    match v {
        Some(v) => serde_json::Value::from(v.index()),
        None => serde_json::Value::Null,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SessionSummary {
    pub handshake_done: bool,
    pub prompt_digest: Option<String>,
    pub compare_requests: usize,
    pub score_requests: usize,
    pub advantage_exports: usize,
    pub errors: usize,
    /// `false` when the peer closed the stream without a shutdown message.
    pub clean_shutdown: bool,
}

impl SessionSummary {
    pub fn requests_served(&self) -> usize {
        self.compare_requests + self.score_requests
    }
}

/// Peer side: answers requests with `policy` until `shutdown` or end of
/// stream. Malformed lines get an error response and the session goes on.
pub fn serve_policy_over_bridge<R: BufRead, W: Write>(
    mut reader: R,
    mut writer: W,
    policy: &dyn PolicyBackend,
) -> Result<SessionSummary> {
    let mut summary = SessionSummary::default();
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            return Ok(summary);
        }
        if !line.ends_with('\n') {
            return Err(EvoqError::SessionAborted(
                "transport closed mid-request".into(),
            ));
        }
        if line.trim().is_empty() {
            continue;
        }
        let reply = match BridgeMessage::parse_line(&line) {
            Err(e) => {
                summary.errors += 1;
                BridgeMessage::Error {
                    id: salvage_id(&line),
                    message: format!("malformed message: {e}"),
                }
            }
            Ok(BridgeMessage::Shutdown { id }) => {
                writer.write_all(BridgeMessage::Ack { id }.to_line()?.as_bytes())?;
                writer.flush()?;
                summary.clean_shutdown = true;
                return Ok(summary);
            }
            Ok(msg) => match answer(msg, policy, &mut summary) {
                Ok(reply) => reply,
                Err((id, e)) => {
                    summary.errors += 1;
                    BridgeMessage::Error {
                        id,
                        message: e.to_string(),
                    }
                }
            },
        };
        writer.write_all(reply.to_line()?.as_bytes())?;
        writer.flush()?;
    }
}

fn salvage_id(line: &str) -> Option<u64> {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()?
        .get("id")?
        .as_u64()
}

fn answer(
    msg: BridgeMessage,
    policy: &dyn PolicyBackend,
    summary: &mut SessionSummary,
) -> std::result::Result<BridgeMessage, (Option<u64>, EvoqError)> {
    let id = msg.id();
    let fail = |e: EvoqError| (id, e);
    if !summary.handshake_done && !matches!(msg, BridgeMessage::Handshake { .. }) {
        return Err(fail(EvoqError::Protocol("handshake required first".into())));
    }
    match msg {
        BridgeMessage::Handshake {
            id,
            protocol_version,
            prompts,
            ..
        } => {
            if protocol_version != PROTOCOL_VERSION {
                return Err(fail(EvoqError::Protocol(format!(
                    "unsupported protocol version {protocol_version}"
                ))));
            }
            prompts.validate().map_err(fail)?;
            let digest = prompts.digest();
            summary.handshake_done = true;
            summary.prompt_digest = Some(digest.clone());
            Ok(BridgeMessage::HandshakeAck {
                id,
                protocol_version: PROTOCOL_VERSION,
                prompt_digest: digest,
            })
        }
        BridgeMessage::CompareRequest {
            id,
            image_a,
            image_b,
            k,
            seed,
            ..
        } => {
            let a = image_a.to_image().map_err(fail)?;
            let b = image_b.to_image().map_err(fail)?;
            let votes = policy.compare_many(&a, &b, k, seed).map_err(fail)?;
            summary.compare_requests += 1;
            Ok(BridgeMessage::CompareResponse {
                id,
                votes: votes.into_iter().map(encode_vote).collect(),
            })
        }
        BridgeMessage::ScoreRequest { id, image, k, seed } => {
            let im = image.to_image().map_err(fail)?;
            let samples = policy.sample_many(&im, k, seed).map_err(fail)?;
            summary.score_requests += 1;
            let log_probs: Option<Vec<f64>> = samples.iter().map(|s| s.log_prob).collect();
            Ok(BridgeMessage::ScoreResponse {
                id,
                scores: samples.iter().map(|s| s.score).collect(),
                log_probs,
            })
        }
        BridgeMessage::AdvantageExport {
            id,
            trajectory_ids,
            advantages,
        } => {
            if trajectory_ids.len() != advantages.len() {
                return Err(fail(EvoqError::Protocol(
                    "trajectory_ids and advantages differ in length".into(),
                )));
            }
            summary.advantage_exports += 1;
            Ok(BridgeMessage::Ack { id })
        }
        other => Err(fail(EvoqError::Protocol(format!(
            "unexpected message from engine: {}",
            kind_of(&other)
        )))),
    }
}

fn kind_of(msg: &BridgeMessage) -> String {
    serde_json::to_value(msg)
        .ok()
        .and_then(|v| v.get("kind").and_then(|k| k.as_str()).map(str::to_owned))
        .unwrap_or_default()
}

struct Session {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
    consecutive_timeouts: u32,
    aborted: Option<String>,
}

/// Engine side of a bridge session.
pub struct RemotePolicy {
    session: Mutex<Session>,
    scale: QualityScale,
    timeout: Duration,
    prompt_digest: String,
    sampling_only: Mutex<Option<bool>>,
    child: Mutex<Option<Child>>,
}

impl std::fmt::Debug for RemotePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemotePolicy")
            .field("scale", &self.scale)
            .field("timeout", &self.timeout)
            .finish_non_exhaustive()
    }
}

impl RemotePolicy {
    /// Performs the handshake over an already open stream pair.
    pub fn connect<R, W>(
        reader: R,
        writer: W,
        scale: QualityScale,
        budget_k: usize,
        timeout: Duration,
    ) -> Result<Self>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let mut reader = BufReader::new(reader);
            loop {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) => break,
                    Ok(_) => {
                        if tx.send(Ok(line)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        });
        let mut policy = RemotePolicy {
            session: Mutex::new(Session {
                writer: Box::new(writer),
                lines: rx,
                next_id: 0,
                consecutive_timeouts: 0,
                aborted: None,
            }),
            scale,
            timeout,
            prompt_digest: String::new(),
            sampling_only: Mutex::new(None),
            child: Mutex::new(None),
        };
        let prompts = PromptTemplates::default();
        let expected = prompts.digest();
        let reply = policy.request(|id| BridgeMessage::Handshake {
            id,
            protocol_version: PROTOCOL_VERSION,
            prompts,
            budget_k,
            score_scale: scale.into(),
        })?;
        match reply {
            BridgeMessage::HandshakeAck {
                protocol_version,
                prompt_digest,
                ..
            } if protocol_version == PROTOCOL_VERSION => {
                if prompt_digest != expected {
                    return Err(EvoqError::Protocol(
                        "peer acknowledged different prompts".into(),
                    ));
                }
                policy.prompt_digest = prompt_digest;
                Ok(policy)
            }
            other => Err(EvoqError::Protocol(format!(
                "bad handshake reply: {}",
                kind_of(&other)
            ))),
        }
    }

    pub fn connect_unix(
        path: &Path,
        scale: QualityScale,
        budget_k: usize,
        timeout: Duration,
    ) -> Result<Self> {
        let stream =
            std::os::unix::net::UnixStream::connect(path).map_err(|e| EvoqError::io(path, e))?;
        let reader = stream.try_clone()?;
        Self::connect(reader, stream, scale, budget_k, timeout)
    }

    /// Spawns `command` through `sh -c` and talks over its stdin/stdout.
    pub fn spawn(
        command: &str,
        scale: QualityScale,
        budget_k: usize,
        timeout: Duration,
    ) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = child
            .stdin
            .take()
            .ok_or_else(|| EvoqError::Protocol("no stdin".into()))?;
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| EvoqError::Protocol("no stdout".into()))?;
        let policy = Self::connect(stdout, stdin, scale, budget_k, timeout)?;
        *policy.child.lock().expect("child lock") = Some(child);
        Ok(policy)
    }

    pub fn prompt_digest(&self) -> &str {
        &self.prompt_digest
    }

    /// `Some(true)` once the peer has answered a score request without
    /// log-probabilities.
    pub fn sampling_only(&self) -> Option<bool> {
        *self.sampling_only.lock().expect("flag lock")
    }

    /// Sends `shutdown` and waits for the acknowledgement.
    pub fn shutdown(&self) -> Result<()> {
        let reply = self.request(|id| BridgeMessage::Shutdown { id })?;
        if let Some(mut child) = self.child.lock().expect("child lock").take() {
            let _ = child.wait();
        }
        match reply {
            BridgeMessage::Ack { .. } => Ok(()),
            other => Err(EvoqError::Protocol(format!(
                "bad shutdown reply: {}",
                kind_of(&other)
            ))),
        }
    }

    fn request(&self, build: impl FnOnce(u64) -> BridgeMessage) -> Result<BridgeMessage> {
        let mut s = self
            .session
            .lock()
            .map_err(|_| EvoqError::SessionAborted("poisoned".into()))?;
        if let Some(reason) = &s.aborted {
            return Err(EvoqError::SessionAborted(reason.clone()));
        }
        let id = s.next_id;
        s.next_id += 1;
        let line = build(id).to_line()?;
        s.writer.write_all(line.as_bytes())?;
        s.writer.flush()?;
        loop {
            match s.lines.recv_timeout(self.timeout) {
                Ok(Ok(line)) => {
                    let msg = BridgeMessage::parse_line(&line)?;
                    match msg.id() {
                        // late answer to a request that already timed out
                        Some(rid) if rid < id => continue,
                        Some(rid) if rid == id => {}
                        _ => {
                            if let BridgeMessage::Error { message, .. } = &msg {
                                return Err(EvoqError::Protocol(message.clone()));
                            }
                            return Err(EvoqError::Protocol(format!(
                                "response id {:?} for request {id}",
                                msg.id()
                            )));
                        }
                    }
                    s.consecutive_timeouts = 0;
                    if let BridgeMessage::Error { message, .. } = msg {
                        return Err(EvoqError::Protocol(message));
                    }
                    return Ok(msg);
                }
                Ok(Err(e)) => {
                    s.aborted = Some(e.to_string());
                    return Err(EvoqError::Transport(e));
                }
                Err(RecvTimeoutError::Disconnected) => {
                    let reason = "transport closed".to_owned();
                    s.aborted = Some(reason.clone());
                    return Err(EvoqError::SessionAborted(reason));
                }
                Err(RecvTimeoutError::Timeout) => {
                    s.consecutive_timeouts += 1;
                    if s.consecutive_timeouts >= MAX_CONSECUTIVE_TIMEOUTS {
                        let reason = format!("{} consecutive timeouts", s.consecutive_timeouts);
                        s.aborted = Some(reason.clone());
                        return Err(EvoqError::SessionAborted(reason));
                    }
                    return Err(EvoqError::Timeout { id });
                }
            }
        }
    }
}

impl Drop for RemotePolicy {
    fn drop(&mut self) {
        if let Ok(mut guard) = self.child.lock() {
            if let Some(mut child) = guard.take() {
                let _ = child.kill();
                let _ = child.wait();
            }
        }
    }
}

impl PolicyBackend for RemotePolicy {
    fn compare_many(
        &self,
        first: &LatentImage,
        second: &LatentImage,
        k: usize,
        seed: u64,
    ) -> Result<Vec<Option<ComparisonVote>>> {
        let reply = self.request(|id| BridgeMessage::CompareRequest {
            id,
            pair_id: id,
            image_a: ImageRef::of(first),
            image_b: ImageRef::of(second),
            k,
            seed,
        })?;
        match reply {
            BridgeMessage::CompareResponse { votes, .. } => {
                if votes.len() != k {
                    return Err(EvoqError::Protocol(format!(
                        "asked for {k} votes, got {}",
                        votes.len()
                    )));
                }
                Ok(votes.iter().map(decode_vote).collect())
            }
            other => Err(EvoqError::Protocol(format!(
                "expected compare_response, got {}",
                kind_of(&other)
            ))),
        }
    }

    fn sample_many(&self, image: &LatentImage, k: usize, seed: u64) -> Result<Vec<ScoreSample>> {
        if k == 0 {
            return Err(EvoqError::EmptyBudget);
        }
        let reply = self.request(|id| BridgeMessage::ScoreRequest {
            id,
            image: ImageRef::of(image),
            k,
            seed,
        })?;
        let BridgeMessage::ScoreResponse {
            scores, log_probs, ..
        } = reply
        else {
            return Err(EvoqError::Protocol(format!(
                "expected score_response, got {}",
                kind_of(&reply)
            )));
        };
        if scores.len() != k {
            return Err(EvoqError::Protocol(format!(
                "asked for {k} scores, got {}",
                scores.len()
            )));
        }
        if let Some(bad) = scores
            .iter()
            .find(|&&s| !(s.is_finite() && s >= self.scale.min_score && s <= self.scale.max_score))
        {
            return Err(EvoqError::Protocol(format!(
                "score {bad} outside the rating scale"
            )));
        }
        if log_probs.as_ref().is_some_and(|lp| lp.len() != k) {
            return Err(EvoqError::Protocol(
                "log_probs length differs from scores".into(),
            ));
        }
        *self.sampling_only.lock().expect("flag lock") = Some(log_probs.is_none());
        Ok(scores
            .iter()
            .enumerate()
            .map(|(i, &score)| ScoreSample {
                score,
                bin: self.scale.nearest_bin(score),
                log_prob: log_probs.as_ref().map(|lp| lp[i]),
                snapshot_tag: "remote".to_owned(),
            })
            .collect())
    }

    fn scale(&self) -> QualityScale {
        self.scale
    }
}

impl ExternalPolicy for RemotePolicy {
    fn export_advantages(&self, trajectory_ids: Vec<String>, advantages: Vec<f64>) -> Result<()> {
        match self.request(|id| BridgeMessage::AdvantageExport {
            id,
            trajectory_ids,
            advantages,
        })? {
            BridgeMessage::Ack { .. } => Ok(()),
            other => Err(EvoqError::Protocol(format!(
                "expected ack, got {}",
                kind_of(&other)
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{BuiltinPolicy, PolicyParams, PolicySnapshot, SnapshotRole};
    use std::io::Cursor;
    use std::os::unix::net::UnixStream;

    fn policy() -> BuiltinPolicy {
        let p = PolicyParams::init(
            QualityScale::default(),
            &crate::world::FeatureEmbedding::grid(4),
            &Default::default(),
            3,
        )
        .unwrap();
        BuiltinPolicy::new(PolicySnapshot::new(SnapshotRole::Current, "t", &p))
    }

    fn image(id: ImageId) -> LatentImage {
        LatentImage {
            id,
            true_quality: 3.0,
            reference_id: None,
            distortion_type: None,
            severity: None,
            features: vec![0.1 * id as f64, 0.5, -0.2, 0.3],
        }
    }

    fn handshake_line() -> String {
        BridgeMessage::Handshake {
            id: 0,
            protocol_version: 1,
            prompts: PromptTemplates::default(),
            budget_k: 32,
            score_scale: QualityScale::default().into(),
        }
        .to_line()
        .unwrap()
    }

    fn replies(out: Vec<u8>) -> Vec<BridgeMessage> {
        String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| BridgeMessage::parse_line(l).unwrap())
            .collect()
    }

    #[test]
    fn handshake_then_shutdown_serves_nothing() {
        let input = handshake_line() + &BridgeMessage::Shutdown { id: 1 }.to_line().unwrap();
        let mut out = Vec::new();
        let s = serve_policy_over_bridge(Cursor::new(input), &mut out, &policy()).unwrap();
        assert_eq!(s.requests_served(), 0);
        assert!(s.clean_shutdown);
        let r = replies(out);
        assert!(matches!(r[0], BridgeMessage::HandshakeAck { id: 0, .. }));
        assert_eq!(r[1], BridgeMessage::Ack { id: 1 });
    }

    #[test]
    fn compare_request_returns_k_votes() {
        let req = BridgeMessage::CompareRequest {
            id: 5,
            pair_id: 0,
            image_a: ImageRef::of(&image(1)),
            image_b: ImageRef::of(&image(2)),
            k: 32,
            seed: 9,
        };
        let input = handshake_line() + &req.to_line().unwrap();
        let mut out = Vec::new();
        serve_policy_over_bridge(Cursor::new(input), &mut out, &policy()).unwrap();
        match &replies(out)[1] {
            BridgeMessage::CompareResponse { id, votes } => {
                assert_eq!(*id, 5);
                assert_eq!(votes.len(), 32);
                assert!(votes.iter().all(|v| v.as_u64().is_some_and(|x| x <= 1)));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_line_gets_error_and_session_continues() {
        let req = BridgeMessage::ScoreRequest {
            id: 7,
            image: ImageRef::of(&image(1)),
            k: 4,
            seed: 1,
        };
        let input = handshake_line()
            + "{\"kind\": \"score_request\", \"id\": 3, \n"
            + &req.to_line().unwrap();
        let mut out = Vec::new();
        let s = serve_policy_over_bridge(Cursor::new(input), &mut out, &policy()).unwrap();
        assert_eq!(s.errors, 1);
        assert_eq!(s.score_requests, 1);
        let r = replies(out);
        assert!(matches!(r[1], BridgeMessage::Error { .. }));
        assert!(
            matches!(&r[2], BridgeMessage::ScoreResponse { id: 7, scores, log_probs: Some(_) } if scores.len() == 4)
        );
    }

    #[test]
    fn error_response_echoes_salvaged_id() {
        let input = handshake_line() + "{\"kind\": \"score_request\", \"id\": 3}\n";
        let mut out = Vec::new();
        serve_policy_over_bridge(Cursor::new(input), &mut out, &policy()).unwrap();
        assert!(matches!(
            replies(out)[1],
            BridgeMessage::Error { id: Some(3), .. }
        ));
    }

    #[test]
    fn request_before_handshake_is_refused() {
        let input = BridgeMessage::ScoreRequest {
            id: 0,
            image: ImageRef::of(&image(1)),
            k: 2,
            seed: 1,
        }
        .to_line()
        .unwrap();
        let mut out = Vec::new();
        serve_policy_over_bridge(Cursor::new(input), &mut out, &policy()).unwrap();
        assert!(matches!(
            replies(out)[0],
            BridgeMessage::Error { id: Some(0), .. }
        ));
    }

    #[test]
    fn truncated_line_is_a_session_error() {
        let input = handshake_line() + "{\"kind\": \"shutdown\"";
        let mut out = Vec::new();
        let err = serve_policy_over_bridge(Cursor::new(input), &mut out, &policy()).unwrap_err();
        assert!(matches!(err, EvoqError::SessionAborted(_)));
    }

    fn loopback() -> (
        RemotePolicy,
        std::thread::JoinHandle<Result<SessionSummary>>,
    ) {
        let (engine, peer) = UnixStream::pair().unwrap();
        let server = std::thread::spawn(move || {
            let reader = BufReader::new(peer.try_clone().unwrap());
            serve_policy_over_bridge(reader, peer, &policy())
        });
        let reader = engine.try_clone().unwrap();
        let remote =
            RemotePolicy::connect(reader, engine, QualityScale::default(), 32, DEFAULT_TIMEOUT)
                .unwrap();
        (remote, server)
    }

    #[test]
    fn remote_matches_in_process() {
        let (remote, server) = loopback();
        let local = policy();
        let (a, b) = (image(1), image(3));
        assert_eq!(
            remote.compare_many(&a, &b, 32, 11).unwrap(),
            local.compare_many(&a, &b, 32, 11).unwrap()
        );
        let r = remote.sample_many(&a, 8, 5).unwrap();
        let l = local.sample_many(&a, 8, 5).unwrap();
        assert_eq!(
            r.iter()
                .map(|s| (s.score, s.bin, s.log_prob))
                .collect::<Vec<_>>(),
            l.iter()
                .map(|s| (s.score, s.bin, s.log_prob))
                .collect::<Vec<_>>()
        );
        assert_eq!(remote.sampling_only(), Some(false));
        remote
            .export_advantages(vec!["x".into()], vec![0.5])
            .unwrap();
        remote.shutdown().unwrap();
        let summary = server.join().unwrap().unwrap();
        assert_eq!(
            (
                summary.compare_requests,
                summary.score_requests,
                summary.advantage_exports
            ),
            (1, 1, 1)
        );
        assert!(summary.clean_shutdown);
    }

    /// A scripted peer answering every request with fixed lines.
    fn scripted_peer(lines: Vec<String>) -> RemotePolicy {
        let (engine, peer) = UnixStream::pair().unwrap();
        std::thread::spawn(move || {
            let mut reader = BufReader::new(peer.try_clone().unwrap());
            let mut writer = peer;
            let mut buf = String::new();
            for reply in lines {
                buf.clear();
                if reader.read_line(&mut buf).unwrap_or(0) == 0 {
                    break;
                }
                writer.write_all(reply.as_bytes()).unwrap();
            }
            // hold the stream open so later requests time out
            std::thread::sleep(Duration::from_secs(5));
        });
        let reader = engine.try_clone().unwrap();
        RemotePolicy::connect(
            reader,
            engine,
            QualityScale::default(),
            32,
            Duration::from_millis(100),
        )
        .unwrap()
    }

    fn ack_line() -> String {
        BridgeMessage::HandshakeAck {
            id: 0,
            protocol_version: 1,
            prompt_digest: PromptTemplates::default().digest(),
        }
        .to_line()
        .unwrap()
    }

    #[test]
    fn invalid_votes_are_abstentions() {
        let mut votes: Vec<serde_json::Value> = (0..30).map(|i| serde_json::json!(i % 2)).collect();
        votes.push(serde_json::Value::Null);
        votes.push(serde_json::json!("B"));
        let reply = BridgeMessage::CompareResponse { id: 1, votes }
            .to_line()
            .unwrap();
        let remote = scripted_peer(vec![ack_line(), reply]);
        let got = remote.compare_many(&image(1), &image(2), 32, 0).unwrap();
        assert_eq!(got.len(), 32);
        assert_eq!(got.iter().filter(|v| v.is_some()).count(), 30);
    }

    #[test]
    fn missing_log_probs_marks_sampling_only() {
        let reply = BridgeMessage::ScoreResponse {
            id: 1,
            scores: vec![3.0, 4.5],
            log_probs: None,
        }
        .to_line()
        .unwrap();
        let remote = scripted_peer(vec![ack_line(), reply]);
        let s = remote.sample_many(&image(1), 2, 0).unwrap();
        assert_eq!(s[1].bin, 14);
        assert!(s.iter().all(|x| x.log_prob.is_none()));
        assert_eq!(remote.sampling_only(), Some(true));
    }

    #[test]
    fn out_of_scale_scores_are_rejected() {
        let reply = BridgeMessage::ScoreResponse {
            id: 1,
            scores: vec![3.0, 7.0],
            log_probs: None,
        }
        .to_line()
        .unwrap();
        let remote = scripted_peer(vec![ack_line(), reply]);
        assert!(matches!(
            remote.sample_many(&image(1), 2, 0),
            Err(EvoqError::Protocol(_))
        ));
    }

    #[test]
    fn three_timeouts_abort_the_session() {
        let remote = scripted_peer(vec![ack_line()]);
        for _ in 0..2 {
            assert!(matches!(
                remote.sample_many(&image(1), 2, 0),
                Err(EvoqError::Timeout { .. })
            ));
        }
        assert!(matches!(
            remote.sample_many(&image(1), 2, 0),
            Err(EvoqError::SessionAborted(_))
        ));
        assert!(matches!(
            remote.sample_many(&image(1), 2, 0),
            Err(EvoqError::SessionAborted(_))
        ));
    }

    #[test]
    fn messages_round_trip() {
        let msgs = vec![
            BridgeMessage::Error {
                id: None,
                message: "x".into(),
            },
            BridgeMessage::ScoreResponse {
                id: 2,
                scores: vec![1.25],
                log_probs: Some(vec![-0.5]),
            },
            BridgeMessage::AdvantageExport {
                id: 3,
                trajectory_ids: vec!["a".into()],
                advantages: vec![-1.0],
            },
        ];
        for m in msgs {
            assert_eq!(BridgeMessage::parse_line(&m.to_line().unwrap()).unwrap(), m);
        }
    }
}
