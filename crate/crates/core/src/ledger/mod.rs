//! Transactions, blocks, gas and the replicated chain state.

mod block;
mod chain;
mod state;
mod tx;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::iot::IotError;
use crate::keys::{Address, PublicKey};
use crate::market::MarketError;

pub use block::{tx_root, Allocation, Block, BlockHeader, Genesis};
pub use chain::{
    append_block, decode_chain, encode_chain, read_chain_jsonl, validate_block, verify_chain,
    write_chain_jsonl, BlockError, ChainFault, ChainFileError, ChainRules, ValidatorSet,
};
pub use state::{apply_transaction, Account, ChainState, Outcome};
pub use tx::{build_transaction, CallKind, ContractCall, Transaction};

/// Flat gas cost per payload kind, in token minor units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GasSchedule {
    pub transfer: u64,
    pub register_user: u64,
    pub attest_kyc: u64,
    pub list_asset: u64,
    pub delist_asset: u64,
    pub set_availability: u64,
    pub book_asset: u64,
    pub cancel_booking: u64,
    pub settle_booking: u64,
    pub transfer_asset: u64,
    pub device_op: u64,
    pub usage_event: u64,
}

impl Default for GasSchedule {
    fn default() -> Self {
        Self {
            transfer: 1,
            register_user: 1,
            attest_kyc: 1,
            list_asset: 10,
            delist_asset: 2,
            set_availability: 2,
            book_asset: 5,
            cancel_booking: 1,
            settle_booking: 5,
            transfer_asset: 2,
            device_op: 2,
            usage_event: 1,
        }
    }
}

impl GasSchedule {
    pub fn cost(&self, kind: CallKind) -> u64 {
        match kind {
            CallKind::PlainTransfer => self.transfer,
            CallKind::RegisterUser => self.register_user,
            CallKind::AttestKyc => self.attest_kyc,
            CallKind::ListAsset => self.list_asset,
            CallKind::DelistAsset => self.delist_asset,
            CallKind::SetAvailability => self.set_availability,
            CallKind::BookAsset => self.book_asset,
            CallKind::CancelBooking => self.cancel_booking,
            CallKind::SettleBooking => self.settle_booking,
            CallKind::TransferAssetOwnership => self.transfer_asset,
            CallKind::RegisterDevice | CallKind::TransferDeviceOwnership => self.device_op,
            CallKind::RecordUsage => self.usage_event,
        }
    }
}

/// Who pays the gas of a usage-event transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UsageGasPayer {
    #[default]
    DeviceOwner,
    Sender,
}

/// Chain-wide parameters fixed at genesis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LedgerParams {
    pub gas: GasSchedule,
    /// Key whose signatures flip a user's KYC flag.
    pub attestor_key: Option<PublicKey>,
    /// Land-registry key whose signatures move asset ownership.
    pub registrar_key: Option<PublicKey>,
    /// Fee kept from a cancelled booking's escrow, in basis points.
    pub cancellation_fee_bps: u64,
    pub usage_gas_payer: UsageGasPayer,
}

impl Default for LedgerParams {
    fn default() -> Self {
        Self {
            gas: GasSchedule::default(),
            attestor_key: None,
            registrar_key: None,
            cancellation_fee_bps: 0,
            usage_gas_payer: UsageGasPayer::DeviceOwner,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TxError {
    #[error("unknown sender {0}")]
    UnknownSender(Address),
    #[error("signature does not verify")]
    BadSignature,
    #[error("nonce {got} already used (account nonce {expected})")]
    NonceReused { expected: u64, got: u64 },
    #[error("nonce {got} is ahead of account nonce {expected}")]
    NonceGap { expected: u64, got: u64 },
    #[error("insufficient funds: need {needed}, have {available}")]
    InsufficientFunds { needed: u64, available: u64 },
    #[error("gas limit {limit} below cost {cost}")]
    GasLimitTooLow { limit: u64, cost: u64 },
    #[error("arithmetic overflow")]
    Overflow,
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Iot(#[from] IotError),
}

impl TxError {
    /// Stable machine-readable name, used in error JSON.
    pub fn code(&self) -> &'static str {
        match self {
            TxError::UnknownSender(_) => "UnknownSender",
            TxError::BadSignature => "BadSignature",
            TxError::NonceReused { .. } => "NonceReused",
            TxError::NonceGap { .. } => "NonceGap",
            TxError::InsufficientFunds { .. } => "InsufficientFunds",
            TxError::GasLimitTooLow { .. } => "GasLimitTooLow",
            TxError::Overflow => "Overflow",
            TxError::Market(e) => e.code(),
            TxError::Iot(e) => e.code(),
        }
    }
}
