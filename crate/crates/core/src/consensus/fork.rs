//! Longest-chain fork choice with a lexicographic head-digest tie-break.

use thiserror::Error;

use crate::keys::Digest;
use crate::ledger::{verify_chain, Block, ChainFault, ChainRules};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ForkChoiceError {
    #[error("candidate chain is invalid: {0}")]
    InvalidCandidate(ChainFault),
    #[error("local chain is invalid: {0}")]
    InvalidLocal(ChainFault),
}

/// True when the candidate head beats the local head: greater height, or
/// equal height and a lower digest.
pub fn prefers_candidate(local: (u64, Digest), candidate: (u64, Digest)) -> bool {
    candidate.0 > local.0 || (candidate.0 == local.0 && candidate.1 < local.1)
}

fn head(chain: &[Block]) -> (u64, Digest) {
    chain
        .last()
        .map_or((0, Digest::ZERO), |b| (b.height, b.header_digest()))
}

/// Returns whichever of the two verified chains is canonical.
pub fn select_canonical_chain<'a>(
    local: &'a [Block],
    candidate: &'a [Block],
    rules: &ChainRules,
) -> Result<&'a [Block], ForkChoiceError> {
    verify_chain(local, rules).map_err(ForkChoiceError::InvalidLocal)?;
    verify_chain(candidate, rules).map_err(ForkChoiceError::InvalidCandidate)?;
    if prefers_candidate(head(local), head(candidate)) {
        Ok(candidate)
    } else {
        Ok(local)
    }
}
