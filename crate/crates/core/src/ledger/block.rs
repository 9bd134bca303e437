use serde::{Deserialize, Serialize};

use crate::codec::canonical_json;
use crate::keys::{digest_bytes, verify_signature, Address, Digest, KeyPair, PublicKey, Signature};

use super::{LedgerParams, Transaction};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Allocation {
    pub address: Address,
    pub amount: u64,
}

/// Contents of block 0: initial balances, the founding validator set and the
/// chain parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genesis {
    pub allocations: Vec<Allocation>,
    pub validators: Vec<Address>,
    pub params: LedgerParams,
}

impl Genesis {
    pub fn digest(&self) -> Digest {
        digest_bytes(&canonical_json(self))
    }

    pub fn supply(&self) -> u128 {
        self.allocations.iter().map(|a| a.amount as u128).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    pub height: u64,
    pub prev_hash: Digest,
    pub tx_root: Digest,
    pub timestamp: u64,
    pub proposer: Address,
    pub proposer_key: PublicKey,
    pub proposer_signature: Signature,
    pub genesis: Option<Genesis>,
    pub transactions: Vec<Transaction>,
}

/// The hashed part of a block; the proposer signature covers its digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockHeader<'a> {
    pub height: u64,
    pub prev_hash: &'a Digest,
    pub tx_root: &'a Digest,
    pub timestamp: u64,
    pub proposer: &'a Address,
    pub proposer_key: &'a PublicKey,
    pub genesis_digest: Option<Digest>,
}

/// Digest of the concatenated per-transaction digests, in block order.
pub fn tx_root(transactions: &[Transaction]) -> Digest {
    let mut buf = Vec::with_capacity(transactions.len() * 32);
    for tx in transactions {
        buf.extend_from_slice(&tx.digest().0);
    }
    digest_bytes(&buf)
}

impl Block {
    pub fn genesis(genesis: Genesis) -> Block {
        Block {
            height: 0,
            prev_hash: Digest::ZERO,
            tx_root: tx_root(&[]),
            timestamp: 0,
            proposer: Address::default(),
            proposer_key: PublicKey(Vec::new()),
            proposer_signature: Signature(Vec::new()),
            genesis: Some(genesis),
            transactions: Vec::new(),
        }
    }

    /// Builds and signs a block on top of `prev_hash`.
    pub fn propose(
        proposer: &KeyPair,
        height: u64,
        prev_hash: Digest,
        timestamp: u64,
        transactions: Vec<Transaction>,
    ) -> Block {
        let mut block = Block {
            height,
            prev_hash,
            tx_root: tx_root(&transactions),
            timestamp,
            proposer: proposer.address(),
            proposer_key: proposer.public_key.clone(),
            proposer_signature: Signature(Vec::new()),
            genesis: None,
            transactions,
        };
        block.proposer_signature = proposer.sign(&block.header_digest().0);
        block
    }

    pub fn header(&self) -> BlockHeader<'_> {
        BlockHeader {
            height: self.height,
            prev_hash: &self.prev_hash,
            tx_root: &self.tx_root,
            timestamp: self.timestamp,
            proposer: &self.proposer,
            proposer_key: &self.proposer_key,
            genesis_digest: self.genesis.as_ref().map(Genesis::digest),
        }
    }

    pub fn header_digest(&self) -> Digest {
        digest_bytes(&canonical_json(&self.header()))
    }

    pub fn computed_tx_root(&self) -> Digest {
        tx_root(&self.transactions)
    }

    pub fn proposer_signature_valid(&self) -> bool {
        self.proposer_key.address().ok() == Some(self.proposer)
            && verify_signature(
                &self.proposer_key.0,
                &self.header_digest().0,
                &self.proposer_signature.0,
            )
    }
}
