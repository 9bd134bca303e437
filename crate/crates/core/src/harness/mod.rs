//! Deterministic scenario runner.
//!
//! A script names actors, devices and validators by seed, then lists actions
//! at non-decreasing ticks. The runner steps the simulated network to each
//! action's tick, signs and dry-runs the transaction against the actor's
//! node, and either submits it or records the rejection. After the last
//! action the network is drained and every invariant suite runs against the
//! result.

mod invariants;
mod random;
mod runner;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::NetworkConfig;
use crate::keys::Digest;
use crate::ledger::{GasSchedule, UsageGasPayer};
use crate::market::Window;

pub use invariants::{check_invariants, InvariantResult};
pub use random::random_script;
pub use runner::{device_topic_key, run_scenario, run_script, RunOptions, ScenarioRun};

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("script does not parse: {0}")]
    Parse(String),
    #[error("invalid script: {0}")]
    Invalid(String),
}

impl ScriptError {
    pub fn code(&self) -> &'static str {
        match self {
            ScriptError::Io { .. } => "IoError",
            ScriptError::Parse(_) | ScriptError::Invalid(_) => "ScriptParseError",
        }
    }
}

/// Personal data that stays in the local data directory. Only the digest of
/// `documents` ever reaches the chain.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalProfile {
    pub name: String,
    pub documents: Vec<String>,
}

impl LocalProfile {
    pub fn kyc_doc_digest(&self) -> Digest {
        crate::keys::digest_bytes(&crate::codec::canonical_json(&self.documents))
    }

    /// Strings that must never appear in shared artifacts.
    pub fn sentinels(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.name.as_str())
            .chain(self.documents.iter().map(String::as_str))
            .filter(|s| !s.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorSpec {
    pub seed: u64,
    #[serde(default)]
    pub balance: u64,
    /// Node index the actor submits through; defaults round-robin by name.
    #[serde(default)]
    pub node: Option<usize>,
    #[serde(default)]
    pub profile: Option<LocalProfile>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub seed: u64,
    /// Node index hosting the device listener.
    #[serde(default)]
    pub node: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamsSpec {
    /// Actor whose key attests KYC documents.
    pub attestor: Option<String>,
    /// Actor whose key signs ownership transfers.
    pub registrar: Option<String>,
    pub cancellation_fee_bps: u64,
    pub gas: Option<GasSchedule>,
    pub usage_gas_payer: UsageGasPayer,
}

/// `"start:end"` or `{start, end}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WindowArg {
    Text(String),
    Struct(Window),
}

impl WindowArg {
    pub fn resolve(&self) -> Result<Window, String> {
        match self {
            WindowArg::Text(t) => t.parse().map_err(|_| format!("bad window {t:?}")),
            WindowArg::Struct(w) => Ok(*w),
        }
    }
}

impl From<Window> for WindowArg {
    fn from(w: Window) -> Self {
        WindowArg::Text(w.to_string())
    }
}

/// One scripted step. Labels name assets and bookings created earlier in the
/// script; actors, devices and nodes are named as declared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", content = "args", rename_all = "snake_case")]
pub enum Command {
    Register,
    AttestKyc { user: String },
    Transfer { to: String, amount: u64 },
    ListAsset {
        label: String,
        #[serde(default)]
        metadata: serde_json::Value,
        lat: f64,
        lon: f64,
        price: u64,
        #[serde(default)]
        sensitive: bool,
    },
    DelistAsset { asset: String },
    SetAvailability { asset: String, window: WindowArg },
    Book {
        label: String,
        asset: String,
        window: WindowArg,
        deposit: u64,
    },
    Cancel { booking: String },
    Settle {
        booking: String,
        #[serde(default)]
        damage: u64,
    },
    TransferAsset { asset: String, to: String },
    RegisterDevice { device: String, asset: String, tariff: u64 },
    TransferDevice { device: String, to: String },
    Meter { device: String, units: u64 },
    Unlock { device: String, booking: String },
    Lock { device: String, booking: String },
    Join {
        seed: u64,
        #[serde(default)]
        credential: bool,
    },
    Persist { dir: String },
    Restore { dir: String },
    /// Persists, flips one bit of the node's block at `height`, and tries to
    /// restore. The live network is left untouched.
    Tamper {
        dir: String,
        #[serde(default)]
        node: usize,
        height: u64,
        #[serde(default)]
        bit: u64,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Register => "register",
            Command::AttestKyc { .. } => "attest_kyc",
            Command::Transfer { .. } => "transfer",
            Command::ListAsset { .. } => "list_asset",
            Command::DelistAsset { .. } => "delist_asset",
            Command::SetAvailability { .. } => "set_availability",
            Command::Book { .. } => "book",
            Command::Cancel { .. } => "cancel",
            Command::Settle { .. } => "settle",
            Command::TransferAsset { .. } => "transfer_asset",
            Command::RegisterDevice { .. } => "register_device",
            Command::TransferDevice { .. } => "transfer_device",
            Command::Meter { .. } => "meter",
            Command::Unlock { .. } => "unlock",
            Command::Lock { .. } => "lock",
            Command::Join { .. } => "join",
            Command::Persist { .. } => "persist",
            Command::Restore { .. } => "restore",
            Command::Tamper { .. } => "tamper",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub tick: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actor: Option<String>,
    #[serde(flatten)]
    pub command: Command,
}

fn default_validators() -> Vec<u64> {
    vec![9001, 9002, 9003, 9004]
}

fn default_drain_ticks() -> u64 {
    10_000
}

fn default_command_ttl() -> u64 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub rng_seed: u64,
    /// Inline network config; `network_config` names a file instead.
    #[serde(default)]
    pub network: Option<NetworkConfig>,
    #[serde(default)]
    pub network_config: Option<PathBuf>,
    #[serde(default = "default_validators")]
    pub validators: Vec<u64>,
    /// Seed of the key that signs admission credentials; sets the network's
    /// `admin_key`.
    #[serde(default)]
    pub admin_seed: Option<u64>,
    #[serde(default)]
    pub actors: BTreeMap<String, ActorSpec>,
    #[serde(default)]
    pub devices: BTreeMap<String, DeviceSpec>,
    #[serde(default)]
    pub params: ParamsSpec,
    #[serde(default = "default_command_ttl")]
    pub command_ttl: u64,
    /// Upper bound on ticks spent draining after the last action.
    #[serde(default = "default_drain_ticks")]
    pub drain_ticks: u64,
    pub actions: Vec<Action>,
}

impl ScenarioScript {
    pub fn from_path(path: &Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScriptError::Io {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut script = if crate::consensus::is_yaml(path) {
            Self::from_yaml(&text)?
        } else {
            Self::from_json(&text)?
        };
        if let (Some(cfg), Some(dir)) = (&script.network_config, path.parent()) {
            if cfg.is_relative() {
                script.network_config = Some(dir.join(cfg));
            }
        }
        Ok(script)
    }

    pub fn from_yaml(text: &str) -> Result<Self, ScriptError> {
        let s: Self = serde_yaml::from_str(text).map_err(|e| ScriptError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self, ScriptError> {
        let s: Self = serde_json::from_str(text).map_err(|e| ScriptError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ScriptError> {
        let bad = |m: String| Err(ScriptError::Invalid(m));
        if self.actions.windows(2).any(|w| w[1].tick < w[0].tick) {
            return bad("action ticks must be non-decreasing".into());
        }
        if self.network.is_some() && self.network_config.is_some() {
            return bad("give either network or network_config, not both".into());
        }
        if self.validators.is_empty() {
            return bad("at least one validator seed is required".into());
        }
        if self.command_ttl == 0 {
            return bad("command_ttl must be >= 1".into());
        }
        for who in [&self.params.attestor, &self.params.registrar].into_iter().flatten() {
            if !self.actors.contains_key(who) {
                return bad(format!("unknown actor {who:?}"));
            }
        }
        for (i, a) in self.actions.iter().enumerate() {
            let system = matches!(
                a.command,
                Command::Join { .. } | Command::Persist { .. } | Command::Restore { .. } | Command::Tamper { .. }
            );
            match &a.actor {
                Some(name) if !self.actors.contains_key(name) => {
                    return bad(format!("action {i}: unknown actor {name:?}"));
                }
                None if !system => return bad(format!("action {i}: {} needs an actor", a.command.name())),
                _ => {}
            }
        }
        Ok(())
    }
}

/// Record of a transaction the runner declined to submit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub tick: u64,
    pub action: usize,
    pub actor: Option<String>,
    pub command: String,
    pub code: String,
    pub message: String,
}

/// A lock/unlock request and what the device decided.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub decided_at: u64,
    pub device: Digest,
    pub booking: Digest,
    pub issuer: crate::keys::Address,
    pub kind: crate::iot::CommandKind,
    pub decision: crate::iot::Decision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TamperCheck {
    pub tick: u64,
    pub node: usize,
    pub height: u64,
    pub detected: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub final_chain_digest: Digest,
    pub final_height: u64,
    pub final_state_digest: Digest,
    pub final_tick: u64,
    pub invariants: Vec<InvariantResult>,
    pub event_counts: BTreeMap<String, u64>,
    pub rejections: Vec<Rejection>,
    pub commands: Vec<CommandRecord>,
    pub tamper_checks: Vec<TamperCheck>,
    /// Propagated errors that did not abort the run.
    pub failures: Vec<Rejection>,
    pub wall_clock_ms: u64,
}

impl ScenarioReport {
    pub fn all_passed(&self) -> bool {
        self.invariants.iter().all(|i| i.passed)
    }

    pub fn invariant(&self, name: &str) -> Option<&InvariantResult> {
        self.invariants.iter().find(|i| i.name == name)
    }
}
