//! Run configuration: TOML on disk, `EVOQ_*` environment overrides on top.
//!
//! Override keys are `EVOQ_<SECTION>__<KEY>` (for example
//! `EVOQ_EVOLUTION__K=16`) or `EVOQ_<KEY>` for top-level keys, matched
//! case-insensitively. Values are parsed as TOML literals and fall back to
//! plain strings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifacts::sha256_hex;
use crate::error::{EvoqError, Result};
use crate::evolution::EvolutionConfig;
use crate::grpo::GrpoConfig;
use crate::policy::{PolicyInit, PolicyParams, QualityScale};
use crate::reward::RewardConfig;
use crate::seed::SeedDerivation;
use crate::world::WorldConfig;

pub const ENV_PREFIX: &str = "EVOQ_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub n_bins: usize,
    pub init: PolicyInit,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            n_bins: QualityScale::default().n_bins,
            init: PolicyInit::default(),
        }
    }
}

/// Where votes and scores come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Builtin,
    /// Connect to a bridge server listening on a unix socket.
    UnixSocket(PathBuf),
    /// Spawn a command and speak the bridge protocol over its stdio.
    Command(String),
}

impl BackendSpec {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "builtin" {
            return Ok(BackendSpec::Builtin);
        }
        if let Some(path) = s.strip_prefix("bridge:unix:") {
            if !path.is_empty() {
                return Ok(BackendSpec::UnixSocket(PathBuf::from(path)));
            }
        }
        if let Some(cmd) = s.strip_prefix("bridge:cmd:") {
            if !cmd.trim().is_empty() {
                return Ok(BackendSpec::Command(cmd.to_owned()));
            }
        }
        Err(EvoqError::config(
            "backend",
            format!("`{s}` is not one of builtin, bridge:unix:<path>, bridge:cmd:<command>"),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub backend: String,
    pub world: WorldConfig,
    pub evolution: EvolutionConfig,
    pub reward: RewardConfig,
    pub grpo: GrpoConfig,
    pub policy: PolicyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            output_dir: PathBuf::from("runs"),
            backend: "builtin".to_owned(),
            world: WorldConfig::default(),
            evolution: EvolutionConfig::default(),
            reward: RewardConfig::default(),
            grpo: GrpoConfig::default(),
            policy: PolicyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| EvoqError::ConfigParse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| EvoqError::ConfigParse(e.to_string()))
    }

    /// Reads `path`, applies process environment overrides, validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| EvoqError::io(path, e))?;
        let config = Self::from_toml_str(&text)?.with_overrides(std::env::vars())?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_toml_string()?;
        std::fs::write(path, text).map_err(|e| EvoqError::io(path, e))
    }

    /// Applies `EVOQ_*` overrides from `vars`; other variables are ignored.
    pub fn with_overrides<I>(self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut root =
            toml::Table::try_from(&self).map_err(|e| EvoqError::ConfigParse(e.to_string()))?;
        let mut touched = false;
        for (name, raw) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let path: Vec<&str> = rest.split("__").collect();
            set_path(&mut root, &path, parse_env_value(&raw), &name)?;
            touched = true;
        }
        if !touched {
            return Ok(self);
        }
        toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| EvoqError::ConfigParse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        BackendSpec::parse(&self.backend)?;
        self.world.validate()?;
        self.scaled_world().validate()?;
        self.evolution.validate()?;
        self.reward.validate()?;
        self.grpo.validate()?;
        QualityScale::with_bins(self.policy.n_bins)
            .validate()
            .map_err(|_| EvoqError::config("policy.n_bins", "must be at least 2"))?;
        Ok(())
    }

    pub fn backend_spec(&self) -> Result<BackendSpec> {
        BackendSpec::parse(&self.backend)
    }

    /// The world actually generated: `n_references` scaled by `desk_scale`.
    pub fn scaled_world(&self) -> WorldConfig {
        let n = (self.world.n_references as f64 * self.evolution.desk_scale).round() as usize;
        WorldConfig {
            n_references: n.max(2),
            ..self.world.clone()
        }
    }

    pub fn scale(&self) -> QualityScale {
        QualityScale::with_bins(self.policy.n_bins)
    }

    pub fn initial_params(&self) -> Result<PolicyParams> {
        PolicyParams::init(
            self.scale(),
            &self.world.embedding(),
            &self.policy.init,
            SeedDerivation::new(self.master_seed).seed("policy/init"),
        )
    }

    /// Content hash of everything that affects results; `output_dir` is
    /// excluded.
    pub fn run_id(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&c)?;
        Ok(sha256_hex(&json)[..16].to_owned())
    }

    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(self.output_dir.join(format!("run_{}", self.run_id()?)))
    }
}

fn parse_env_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.to_owned())),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

fn set_path(table: &mut toml::Table, path: &[&str], value: toml::Value, var: &str) -> Result<()> {
    let unknown = || EvoqError::config(var, "does not name a configuration key");
    let (head, rest) = path.split_first().ok_or_else(unknown)?;
    let key = table
        .keys()
        .find(|k| k.eq_ignore_ascii_case(head))
        .cloned()
        .or_else(|| (rest.is_empty() && is_optional_key(head)).then(|| head.to_ascii_lowercase()))
        .ok_or_else(unknown)?;
    if rest.is_empty() {
        table.insert(key, value);
        return Ok(());
    }
    match table.get_mut(&key) {
        Some(toml::Value::Table(inner)) => set_path(inner, rest, value, var),
        _ => Err(unknown()),
    }
}

// Optional keys are absent from the serialized defaults.
fn is_optional_key(name: &str) -> bool {
    name.eq_ignore_ascii_case("sample_k")
}
