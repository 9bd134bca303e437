use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{canonical_json, parse_canonical};
use crate::keys::{Address, Digest};

use super::{apply_transaction, Block, ChainState, Genesis, TxError};

/// Validators admitted so far, each with the first height it may propose.
///
/// The proposer for height `h` is the `h mod n`-th of the `n` validators
/// active at `h`, sorted by address.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidatorSet {
    entries: BTreeMap<Address, u64>,
}

impl ValidatorSet {
    pub fn from_genesis(genesis: &Genesis) -> Self {
        ValidatorSet {
            entries: genesis.validators.iter().map(|v| (*v, 0)).collect(),
        }
    }

    /// Returns false if `validator` was already present.
    pub fn admit(&mut self, validator: Address, from_height: u64) -> bool {
        if self.entries.contains_key(&validator) {
            return false;
        }
        self.entries.insert(validator, from_height);
        true
    }

    pub fn contains(&self, validator: &Address) -> bool {
        self.entries.contains_key(validator)
    }

    pub fn active_at(&self, height: u64) -> Vec<Address> {
        self.entries
            .iter()
            .filter(|(_, from)| **from <= height)
            .map(|(a, _)| *a)
            .collect()
    }

    pub fn proposer_for(&self, height: u64) -> Option<Address> {
        let active = self.active_at(height);
        if active.is_empty() {
            return None;
        }
        Some(active[(height % active.len() as u64) as usize])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BlockError {
    #[error("prev_hash {got} does not match head {expected}")]
    HashMismatch { expected: Digest, got: Digest },
    #[error("height {got} does not follow head height {expected}")]
    WrongHeight { expected: u64, got: u64 },
    #[error("proposer {got} is not scheduled (expected {expected:?})")]
    WrongProposer {
        expected: Option<Address>,
        got: Address,
    },
    #[error("tx_root does not match transactions")]
    BadTxRoot,
    #[error("proposer signature does not verify")]
    BadProposerSignature,
    #[error("timestamp {got} precedes parent timestamp {parent}")]
    BadTimestamp { parent: u64, got: u64 },
    #[error("transaction {index} invalid: {cause}")]
    TxInvalid { index: usize, cause: TxError },
    #[error("bad genesis block: {0}")]
    BadGenesis(String),
    #[error("unreadable block record: {0}")]
    Malformed(String),
}

impl BlockError {
    pub fn code(&self) -> &'static str {
        match self {
            BlockError::HashMismatch { .. } => "HashMismatch",
            BlockError::WrongHeight { .. } => "WrongHeight",
            BlockError::WrongProposer { .. } => "WrongProposer",
            BlockError::BadTxRoot => "BadTxRoot",
            BlockError::BadProposerSignature => "BadProposerSignature",
            BlockError::BadTimestamp { .. } => "BadTimestamp",
            BlockError::TxInvalid { .. } => "TxInvalid",
            BlockError::BadGenesis(_) => "BadGenesis",
            BlockError::Malformed(_) => "Malformed",
        }
    }
}

/// Lowest height at which a chain fails verification.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("chain invalid at height {height}: {cause}")]
pub struct ChainFault {
    pub height: u64,
    pub cause: BlockError,
}

/// Context for verifying a whole chain.
#[derive(Debug, Clone, Default)]
pub struct ChainRules {
    /// Validator schedule; defaults to the genesis validator set.
    pub validators: Option<ValidatorSet>,
    /// Expected genesis header digest. Without it block 0 is trusted as is.
    pub genesis_anchor: Option<Digest>,
}

/// Checks `block` against `state` and returns the state after it.
pub fn validate_block(
    state: &ChainState,
    block: &Block,
    validators: &ValidatorSet,
) -> Result<ChainState, BlockError> {
    if block.prev_hash != state.head_digest {
        return Err(BlockError::HashMismatch {
            expected: state.head_digest,
            got: block.prev_hash,
        });
    }
    if block.height != state.height + 1 {
        return Err(BlockError::WrongHeight {
            expected: state.height + 1,
            got: block.height,
        });
    }
    if block.genesis.is_some() {
        return Err(BlockError::BadGenesis("genesis payload above height 0".into()));
    }
    if block.computed_tx_root() != block.tx_root {
        return Err(BlockError::BadTxRoot);
    }
    let expected = validators.proposer_for(block.height);
    if expected != Some(block.proposer) {
        return Err(BlockError::WrongProposer {
            expected,
            got: block.proposer,
        });
    }
    if !block.proposer_signature_valid() {
        return Err(BlockError::BadProposerSignature);
    }
    if block.timestamp < state.head_timestamp {
        return Err(BlockError::BadTimestamp {
            parent: state.head_timestamp,
            got: block.timestamp,
        });
    }

    let mut next = state.clone();
    next.begin_block(block.timestamp);
    for (index, tx) in block.transactions.iter().enumerate() {
        apply_transaction(&mut next, tx, &block.proposer)
            .map_err(|cause| BlockError::TxInvalid { index, cause })?;
    }
    next.finish_block(block);
    Ok(next)
}

pub fn append_block(
    state: &mut ChainState,
    chain: &mut Vec<Block>,
    block: Block,
    validators: &ValidatorSet,
) -> Result<(), BlockError> {
    let next = validate_block(state, &block, validators)?;
    *state = next;
    chain.push(block);
    Ok(())
}

fn check_genesis(block: &Block, anchor: Option<Digest>) -> Result<ChainState, BlockError> {
    let bad = |m: &str| Err(BlockError::BadGenesis(m.to_string()));
    if block.height != 0 {
        return bad("height is not 0");
    }
    if block.prev_hash != Digest::ZERO {
        return bad("prev_hash is not zero");
    }
    if !block.transactions.is_empty() {
        return bad("genesis carries transactions");
    }
    if block.computed_tx_root() != block.tx_root {
        return Err(BlockError::BadTxRoot);
    }
    if let Some(anchor) = anchor {
        if block.header_digest() != anchor {
            return Err(BlockError::HashMismatch {
                expected: anchor,
                got: block.header_digest(),
            });
        }
    }
    ChainState::from_genesis(block).map_or_else(|| bad("missing or invalid genesis payload"), Ok)
}

/// Replays `blocks` from genesis, re-validating every block.
pub fn verify_chain(blocks: &[Block], rules: &ChainRules) -> Result<ChainState, ChainFault> {
    let fault = |height: u64| move |cause| ChainFault { height, cause };
    let genesis = blocks.first().ok_or(ChainFault {
        height: 0,
        cause: BlockError::BadGenesis("empty chain".into()),
    })?;
    let mut state = check_genesis(genesis, rules.genesis_anchor).map_err(fault(0))?;
    let validators = match &rules.validators {
        Some(v) => v.clone(),
        None => ValidatorSet::from_genesis(genesis.genesis.as_ref().expect("checked above")),
    };
    for (i, block) in blocks.iter().enumerate().skip(1) {
        state = validate_block(&state, block, &validators).map_err(fault(i as u64))?;
    }
    Ok(state)
}

#[derive(Debug, Error)]
pub enum ChainFileError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: last line is truncated")]
    Truncated { path: PathBuf },
    #[error("{path}: line {line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

/// Decodes a JSON-lines block log; the error carries the zero-based line,
/// which is also the block height.
pub fn decode_chain(bytes: &[u8]) -> Result<Vec<Block>, (usize, String)> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let mut lines: Vec<&[u8]> = bytes.split(|b| *b == b'\n').collect();
    let complete = lines.last().is_some_and(|l| l.is_empty());
    if complete {
        lines.pop();
    }
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if !complete && i + 1 == lines.len() {
            return Err((i, "truncated record".into()));
        }
        out.push(parse_canonical::<Block>(line).map_err(|e| (i, e))?);
    }
    Ok(out)
}

pub fn encode_chain(blocks: &[Block]) -> Vec<u8> {
    let mut out = Vec::new();
    for block in blocks {
        out.extend_from_slice(&canonical_json(block));
        out.push(b'\n');
    }
    out
}

pub fn write_chain_jsonl(path: &Path, blocks: &[Block]) -> Result<(), ChainFileError> {
    let io = |source| ChainFileError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("jsonl.tmp");
    let mut file = std::fs::File::create(&tmp).map_err(io)?;
    file.write_all(&encode_chain(blocks)).map_err(io)?;
    file.sync_all().map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn read_chain_jsonl(path: &Path) -> Result<Vec<Block>, ChainFileError> {
    let bytes = std::fs::read(path).map_err(|source| ChainFileError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if !bytes.is_empty() && !bytes.ends_with(b"\n") {
        return Err(ChainFileError::Truncated {
            path: path.to_path_buf(),
        });
    }
    decode_chain(&bytes).map_err(|(line, reason)| ChainFileError::Malformed {
        path: path.to_path_buf(),
        line,
        reason,
    })
}
