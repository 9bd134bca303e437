//! Deterministic discrete-event simulation of a round-robin
//! proof-of-authority network.
//!
//! Time is an integer tick. Messages travel with per-pair latency, crossing a
//! partition defers delivery until the partition heals, and every event is
//! processed in `(tick, insertion order)`. Given the same config and the same
//! submission schedule, two runs produce identical traces.

mod fork;
mod network;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keys::{digest_parts, Address, Digest, PublicKey};
use crate::ledger::ChainFault;
use crate::whisper::{WhisperError, DEFAULT_DIFFICULTY};

pub use fork::{prefers_candidate, select_canonical_chain, ForkChoiceError};
pub use network::{
    create_network, GenesisSpec, InFlight, Message, Network, NetworkSnapshot, Node, NodeSnapshot,
    PendingTx,
};

pub type NodeId = Address;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetworkError {
    #[error("genesis needs at least one validator")]
    EmptyValidatorSet,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("permission denied")]
    PermissionDenied,
    #[error("node {0} already joined")]
    AlreadyJoined(NodeId),
    #[error(transparent)]
    Whisper(#[from] WhisperError),
    #[error("network did not quiesce within {0} ticks")]
    NotQuiescent(u64),
    #[error("invalid network config: {0}")]
    BadConfig(String),
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
    #[error("node {node} chain invalid: {fault}")]
    InvalidChain { node: NodeId, fault: ChainFault },
}

impl NetworkError {
    pub fn code(&self) -> &'static str {
        match self {
            NetworkError::EmptyValidatorSet => "EmptyValidatorSet",
            NetworkError::UnknownNode(_) => "UnknownNode",
            NetworkError::PermissionDenied => "PermissionDenied",
            NetworkError::AlreadyJoined(_) => "AlreadyJoined",
            NetworkError::Whisper(e) => e.code(),
            NetworkError::NotQuiescent(_) => "NotQuiescent",
            NetworkError::BadConfig(_) => "BadConfig",
            NetworkError::CorruptSnapshot(_) => "CorruptSnapshot",
            NetworkError::InvalidChain { .. } => "CorruptSnapshot",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Permissioned,
    #[default]
    Permissionless,
}

/// A node named either by creation index or by address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NodeRef {
    Index(usize),
    Address(Address),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyOverride {
    pub a: NodeRef,
    pub b: NodeRef,
    pub ticks: u64,
}

/// Pairwise latency. Pairs without an override draw uniformly from
/// `[min, max]` using a generator keyed by the seed and the pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    pub min: u64,
    pub max: u64,
    pub overrides: Vec<LatencyOverride>,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig {
            min: 1,
            max: 1,
            overrides: Vec::new(),
        }
    }
}

/// `group` is cut off from every other node for ticks `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Partition {
    pub group: Vec<NodeRef>,
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub mode: Mode,
    pub block_interval: u64,
    pub latency: LatencyConfig,
    pub partitions: Vec<Partition>,
    pub rng_seed: u64,
    /// Signs admission credentials in permissioned mode.
    pub admin_key: Option<PublicKey>,
    pub whisper_difficulty: u32,
    /// Ticks a transaction that keeps failing stays pooled before it is dropped.
    pub tx_retry_ticks: u64,
    /// Propose blocks even with nothing pending.
    pub heartbeat_blocks: bool,
    pub max_block_txs: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            mode: Mode::Permissionless,
            block_interval: 1,
            latency: LatencyConfig::default(),
            partitions: Vec::new(),
            rng_seed: 0,
            admin_key: None,
            whisper_difficulty: DEFAULT_DIFFICULTY,
            tx_retry_ticks: 20,
            heartbeat_blocks: false,
            max_block_txs: 500,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: &str| Err(NetworkError::BadConfig(m.into()));
        if self.block_interval < 1 {
            return bad("block_interval must be >= 1");
        }
        if self.latency.min < 1 || self.latency.max < self.latency.min {
            return bad("latency range must satisfy 1 <= min <= max");
        }
        if self.latency.overrides.iter().any(|o| o.ticks < 1) {
            return bad("latency overrides must be >= 1");
        }
        if self.partitions.iter().any(|p| p.end < p.start) {
            return bad("partition end precedes start");
        }
        if self.max_block_txs == 0 {
            return bad("max_block_txs must be >= 1");
        }
        Ok(())
    }

    /// Reads JSON, or YAML when the extension is `.yaml`/`.yml`.
    pub fn from_path(path: &Path) -> Result<Self, NetworkError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NetworkError::BadConfig(format!("{}: {e}", path.display())))?;
        let cfg: NetworkConfig = if is_yaml(path) {
            serde_yaml::from_str(&text).map_err(|e| NetworkError::BadConfig(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| NetworkError::BadConfig(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub(crate) fn base_latency(&self, a: &Address, b: &Address) -> u64 {
        if self.latency.min == self.latency.max {
            return self.latency.min;
        }
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let seed = digest_parts(&[&self.rng_seed.to_be_bytes(), &lo.0, &hi.0]);
        ChaCha8Rng::from_seed(seed.0).gen_range(self.latency.min..=self.latency.max)
    }
}

/// True for `.yaml` and `.yml` paths.
pub fn is_yaml(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("yaml") | Some("yml")
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    TxSubmitted,
    TxGossip,
    TxDropped,
    BlockProposed,
    BlockGossip,
    BlockAppended,
    BlockRejected,
    ChainSwitched,
    JoinRequest,
    EnvelopePosted,
    EnvelopeGossip,
    EnvelopeDropped,
}

/// One line of `trace.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub tick: u64,
    pub seq: u64,
    pub kind: TraceKind,
    pub node: NodeId,
    pub peer: Option<NodeId>,
    pub digest: Option<Digest>,
    pub height: Option<u64>,
    pub detail: Option<String>,
}
