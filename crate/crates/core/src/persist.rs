//! On-disk snapshots of a simulated network.
//!
//! Layout under the data directory:
//!
//! ```text
//! network.json                 config, validator schedule, pools, in-flight gossip
//! nodes/<address>/chain.jsonl  one canonical block per line
//! ```
//!
//! Whisper pools are ephemeral and never written.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::codec::{canonical_json, parse_canonical};
use crate::consensus::{Network, NetworkError, NetworkSnapshot, NodeId};
use crate::ledger::{read_chain_jsonl, write_chain_jsonl, ChainFileError};

pub const NETWORK_FILE: &str = "network.json";

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error(transparent)]
    Corrupt(NetworkError),
}

impl PersistError {
    pub fn code(&self) -> &'static str {
        match self {
            PersistError::Io { .. } => "IoError",
            PersistError::Corrupt(_) => "CorruptSnapshot",
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match self {
            PersistError::Io { path, .. } => Some(path),
            PersistError::Corrupt(_) => None,
        }
    }
}

fn io_err(path: &Path, e: impl ToString) -> PersistError {
    PersistError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn corrupt(msg: String) -> PersistError {
    PersistError::Corrupt(NetworkError::CorruptSnapshot(msg))
}

pub fn chain_path(dir: &Path, node: &NodeId) -> PathBuf {
    dir.join("nodes").join(node.to_hex()).join("chain.jsonl")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PersistError> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Writes every node's block log and the network snapshot. Output is
/// canonical, so persisting an unchanged network rewrites identical bytes.
pub fn persist_state(network: &Network, dir: &Path) -> Result<(), PersistError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for node in network.nodes() {
        let path = chain_path(dir, &node.id);
        let parent = path.parent().expect("chain path has a parent");
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        write_chain_jsonl(&path, node.chain()).map_err(|e| match e {
            ChainFileError::Io { path, source } => io_err(&path, source),
            other => io_err(&path, other),
        })?;
    }
    let path = dir.join(NETWORK_FILE);
    let mut bytes = canonical_json(&network.snapshot());
    bytes.push(b'\n');
    write_atomic(&path, &bytes)
}

/// Reloads a persisted network, re-verifying every block log from genesis.
pub fn restore_state(dir: &Path) -> Result<Network, PersistError> {
    let path = dir.join(NETWORK_FILE);
    let bytes = match std::fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(corrupt(format!("{} is missing", path.display())));
        }
        Err(e) => return Err(io_err(&path, e)),
    };
    let body = bytes.strip_suffix(b"\n").unwrap_or(&bytes);
    let snapshot: NetworkSnapshot =
        parse_canonical(body).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
    let mut chains = BTreeMap::new();
    for ns in &snapshot.nodes {
        let path = chain_path(dir, &ns.id);
        let blocks = read_chain_jsonl(&path).map_err(|e| match e {
            ChainFileError::Io { path, source } => io_err(&path, source),
            ChainFileError::Truncated { path } => io_err(&path, "truncated last line"),
            ChainFileError::Malformed { path, line, reason } => {
                corrupt(format!("{} line {}: {reason}", path.display(), line + 1))
            }
        })?;
        chains.insert(ns.id, blocks);
    }
    Network::restore(snapshot, chains).map_err(|e| match e {
        NetworkError::BadConfig(m) => corrupt(m),
        other => PersistError::Corrupt(other),
    })
}
