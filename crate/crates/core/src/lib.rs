//! Desk-scale protocol kit for a decentralized rental market: a hash-chained
//! ledger with native booking and device contracts, a deterministic
//! proof-of-authority network simulator, an encrypted off-chain message bus,
//! and a scenario harness.

pub mod api;
pub mod codec;
pub mod consensus;
pub mod fx;
pub mod harness;
pub mod iot;
pub mod keys;
pub mod ledger;
pub mod market;
pub mod persist;
pub mod whisper;

#[cfg(test)]
pub(crate) mod testkit;
