use serde::{Deserialize, Serialize};

use crate::codec::canonical_json;
use crate::iot::UsageEvent;
use crate::keys::{digest_bytes, verify_signature, Address, Digest, KeyPair, PublicKey, Signature};
use crate::market::{Location, OwnershipAttestation, Window};

use super::{ChainState, TxError};

/// Every state transition a transaction can carry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "call", rename_all = "snake_case", deny_unknown_fields)]
pub enum ContractCall {
    PlainTransfer {
        to: Address,
        amount: u64,
    },
    RegisterUser {
        kyc_doc_digest: Digest,
    },
    AttestKyc {
        user: Address,
        attestor_signature: Signature,
    },
    ListAsset {
        metadata_digest: Digest,
        location: Location,
        price_per_tick: u64,
        sensitive: bool,
    },
    DelistAsset {
        asset_id: Digest,
    },
    SetAvailability {
        asset_id: Digest,
        window: Window,
    },
    BookAsset {
        asset_id: Digest,
        window: Window,
        deposit: u64,
    },
    CancelBooking {
        booking_id: Digest,
    },
    SettleBooking {
        booking_id: Digest,
        damage_claim: u64,
    },
    TransferAssetOwnership {
        attestation: OwnershipAttestation,
    },
    RegisterDevice {
        asset_id: Digest,
        device_public_key: PublicKey,
        tariff: u64,
    },
    TransferDeviceOwnership {
        device_id: Digest,
        new_owner: Address,
    },
    RecordUsage {
        event: UsageEvent,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    PlainTransfer,
    RegisterUser,
    AttestKyc,
    ListAsset,
    DelistAsset,
    SetAvailability,
    BookAsset,
    CancelBooking,
    SettleBooking,
    TransferAssetOwnership,
    RegisterDevice,
    TransferDeviceOwnership,
    RecordUsage,
}

impl ContractCall {
    pub fn kind(&self) -> CallKind {
        match self {
            ContractCall::PlainTransfer { .. } => CallKind::PlainTransfer,
            ContractCall::RegisterUser { .. } => CallKind::RegisterUser,
            ContractCall::AttestKyc { .. } => CallKind::AttestKyc,
            ContractCall::ListAsset { .. } => CallKind::ListAsset,
            ContractCall::DelistAsset { .. } => CallKind::DelistAsset,
            ContractCall::SetAvailability { .. } => CallKind::SetAvailability,
            ContractCall::BookAsset { .. } => CallKind::BookAsset,
            ContractCall::CancelBooking { .. } => CallKind::CancelBooking,
            ContractCall::SettleBooking { .. } => CallKind::SettleBooking,
            ContractCall::TransferAssetOwnership { .. } => CallKind::TransferAssetOwnership,
            ContractCall::RegisterDevice { .. } => CallKind::RegisterDevice,
            ContractCall::TransferDeviceOwnership { .. } => CallKind::TransferDeviceOwnership,
            ContractCall::RecordUsage { .. } => CallKind::RecordUsage,
        }
    }
}

/// A signed state transition.
///
/// The sender's public key travels with the transaction because an address
/// is a one-way digest of it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transaction {
    pub sender: Address,
    pub sender_key: PublicKey,
    pub nonce: u64,
    pub payload: ContractCall,
    pub gas_limit: u64,
    pub signature: Signature,
}

#[derive(Serialize)]
struct SigningBody<'a> {
    sender: &'a Address,
    sender_key: &'a PublicKey,
    nonce: u64,
    payload: &'a ContractCall,
    gas_limit: u64,
}

impl Transaction {
    pub fn signing_bytes(&self) -> Vec<u8> {
        signing_bytes(&self.sender, &self.sender_key, self.nonce, &self.payload, self.gas_limit)
    }

    /// Digest of the full signed transaction.
    pub fn digest(&self) -> Digest {
        digest_bytes(&canonical_json(self))
    }

    pub fn signature_valid(&self) -> bool {
        self.sender_key.address().ok() == Some(self.sender)
            && verify_signature(&self.sender_key.0, &self.signing_bytes(), &self.signature.0)
    }

    /// Signs without consulting any state.
    pub fn signed(keypair: &KeyPair, nonce: u64, payload: ContractCall, gas_limit: u64) -> Self {
        let sender = keypair.address();
        let bytes = signing_bytes(&sender, &keypair.public_key, nonce, &payload, gas_limit);
        Transaction {
            sender,
            sender_key: keypair.public_key.clone(),
            nonce,
            payload,
            gas_limit,
            signature: keypair.sign(&bytes),
        }
    }
}

fn signing_bytes(
    sender: &Address,
    sender_key: &PublicKey,
    nonce: u64,
    payload: &ContractCall,
    gas_limit: u64,
) -> Vec<u8> {
    canonical_json(&SigningBody {
        sender,
        sender_key,
        nonce,
        payload,
        gas_limit,
    })
}

/// Signs `payload` with the sender's current account nonce.
pub fn build_transaction(
    keypair: &KeyPair,
    state: &ChainState,
    payload: ContractCall,
    gas_limit: u64,
) -> Result<Transaction, TxError> {
    let sender = keypair.address();
    let account = state
        .accounts
        .get(&sender)
        .ok_or(TxError::UnknownSender(sender))?;
    Ok(Transaction::signed(keypair, account.nonce, payload, gas_limit))
}
