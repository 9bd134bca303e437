use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::codec::canonical_json;
use crate::iot::{self, BillStatement, DeviceRecord, UsageEvent};
use crate::keys::{digest_bytes, Address, Digest};
use crate::market::{self, AssetRecord, Booking, SettlementResult, UserRecord};

use super::{Block, ContractCall, Genesis, LedgerParams, Transaction, TxError, UsageGasPayer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Account {
    pub address: Address,
    pub balance: u64,
    /// Escrowed funds; only cancel or settle of the owning booking releases them.
    pub locked: u64,
    pub nonce: u64,
    pub kyc_attested: bool,
}

impl Account {
    pub fn new(address: Address) -> Self {
        Account {
            address,
            balance: 0,
            locked: 0,
            nonce: 0,
            kyc_attested: false,
        }
    }
}

/// Replicated ledger state. Reconstructible by replaying blocks from genesis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainState {
    pub params: LedgerParams,
    pub accounts: BTreeMap<Address, Account>,
    pub users: BTreeMap<Address, UserRecord>,
    pub assets: BTreeMap<Digest, AssetRecord>,
    pub bookings: BTreeMap<Digest, Booking>,
    pub settlements: BTreeMap<Digest, SettlementResult>,
    pub devices: BTreeMap<Digest, DeviceRecord>,
    /// Append-only usage log, grouped by device.
    pub usage: BTreeMap<Digest, Vec<UsageEvent>>,
    pub usage_seen: BTreeSet<Digest>,
    pub head_digest: Digest,
    pub height: u64,
    pub head_timestamp: u64,
    /// Tick of the block currently being applied.
    pub now: u64,
}

/// What a successfully applied transaction produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Outcome {
    Transferred { to: Address, amount: u64 },
    UserRegistered { user: UserRecord },
    KycAttested { user: Address },
    AssetListed { asset_id: Digest },
    AssetUpdated { asset: AssetRecord },
    Booked { booking: Booking },
    BookingCancelled { booking: Booking, refund: u64, fee: u64 },
    Settled { result: SettlementResult },
    DeviceRegistered { device: DeviceRecord },
    DeviceUpdated { device: DeviceRecord },
    UsageRecorded { device_id: Digest, units: u64 },
}

impl ChainState {
    pub fn from_genesis(block: &Block) -> Option<ChainState> {
        let genesis: &Genesis = block.genesis.as_ref()?;
        let mut accounts = BTreeMap::new();
        for alloc in &genesis.allocations {
            let acct = accounts
                .entry(alloc.address)
                .or_insert_with(|| Account::new(alloc.address));
            acct.balance = acct.balance.checked_add(alloc.amount)?;
        }
        for v in &genesis.validators {
            accounts.entry(*v).or_insert_with(|| Account::new(*v));
        }
        Some(ChainState {
            params: genesis.params.clone(),
            accounts,
            users: BTreeMap::new(),
            assets: BTreeMap::new(),
            bookings: BTreeMap::new(),
            settlements: BTreeMap::new(),
            devices: BTreeMap::new(),
            usage: BTreeMap::new(),
            usage_seen: BTreeSet::new(),
            head_digest: block.header_digest(),
            height: 0,
            head_timestamp: block.timestamp,
            now: block.timestamp,
        })
    }

    pub fn digest(&self) -> Digest {
        digest_bytes(&canonical_json(self))
    }

    /// Σ(balance + locked) over all accounts.
    pub fn total_supply(&self) -> u128 {
        self.accounts
            .values()
            .map(|a| a.balance as u128 + a.locked as u128)
            .sum()
    }

    pub fn account(&self, address: &Address) -> Option<&Account> {
        self.accounts.get(address)
    }

    pub fn balance(&self, address: &Address) -> u64 {
        self.accounts.get(address).map_or(0, |a| a.balance)
    }

    pub fn locked(&self, address: &Address) -> u64 {
        self.accounts.get(address).map_or(0, |a| a.locked)
    }

    pub(crate) fn account_mut(&mut self, address: Address) -> &mut Account {
        self.accounts
            .entry(address)
            .or_insert_with(|| Account::new(address))
    }

    pub(crate) fn debit(&mut self, address: Address, amount: u64) -> Result<(), TxError> {
        let acct = self
            .accounts
            .get_mut(&address)
            .ok_or(TxError::InsufficientFunds {
                needed: amount,
                available: 0,
            })?;
        if acct.balance < amount {
            return Err(TxError::InsufficientFunds {
                needed: amount,
                available: acct.balance,
            });
        }
        acct.balance -= amount;
        Ok(())
    }

    pub(crate) fn credit(&mut self, address: Address, amount: u64) -> Result<(), TxError> {
        let acct = self.account_mut(address);
        acct.balance = acct.balance.checked_add(amount).ok_or(TxError::Overflow)?;
        Ok(())
    }

    /// Moves `amount` from spendable balance into escrow.
    pub(crate) fn lock(&mut self, address: Address, amount: u64) -> Result<(), TxError> {
        self.debit(address, amount)?;
        let acct = self.account_mut(address);
        acct.locked = acct.locked.checked_add(amount).ok_or(TxError::Overflow)?;
        Ok(())
    }

    /// Releases `amount` of escrow without crediting it anywhere; the caller
    /// must route the funds.
    pub(crate) fn release_locked(&mut self, address: Address, amount: u64) -> Result<(), TxError> {
        let acct = self.account_mut(address);
        acct.locked = acct.locked.checked_sub(amount).ok_or(TxError::Overflow)?;
        Ok(())
    }

    /// Per-block hook run before the block's transactions: advances the clock
    /// and activates due bookings.
    pub fn begin_block(&mut self, timestamp: u64) -> Vec<Digest> {
        self.now = timestamp;
        market::activate_bookings(self, timestamp)
    }

    pub fn finish_block(&mut self, block: &Block) {
        self.head_digest = block.header_digest();
        self.height = block.height;
        self.head_timestamp = block.timestamp;
    }

    pub fn compute_bill(&self, booking_id: &Digest) -> Result<Vec<BillStatement>, TxError> {
        iot::compute_bill(self, booking_id).map_err(TxError::from)
    }
}

/// Applies one transaction at the state's current tick, paying gas to
/// `proposer`. On error the state is left untouched.
pub fn apply_transaction(
    state: &mut ChainState,
    tx: &Transaction,
    proposer: &Address,
) -> Result<Outcome, TxError> {
    // Read-only checks first: most rejections then skip the state copy.
    precheck(state, tx)?;
    let mut next = state.clone();
    let outcome = apply_in_place(&mut next, tx, proposer)?;
    *state = next;
    Ok(outcome)
}

fn precheck(state: &ChainState, tx: &Transaction) -> Result<(), TxError> {
    if !tx.signature_valid() {
        return Err(TxError::BadSignature);
    }
    let sender = tx.sender;
    let expected = state
        .accounts
        .get(&sender)
        .ok_or(TxError::UnknownSender(sender))?
        .nonce;
    if tx.nonce < expected {
        return Err(TxError::NonceReused {
            expected,
            got: tx.nonce,
        });
    }
    if tx.nonce > expected {
        return Err(TxError::NonceGap {
            expected,
            got: tx.nonce,
        });
    }

    let cost = state.params.gas.cost(tx.payload.kind());
    if tx.gas_limit < cost {
        return Err(TxError::GasLimitTooLow {
            limit: tx.gas_limit,
            cost,
        });
    }
    Ok(())
}

fn apply_in_place(
    state: &mut ChainState,
    tx: &Transaction,
    proposer: &Address,
) -> Result<Outcome, TxError> {
    let sender = tx.sender;
    let cost = state.params.gas.cost(tx.payload.kind());
    let gas_payer = match (&tx.payload, state.params.usage_gas_payer) {
        (ContractCall::RecordUsage { event }, UsageGasPayer::DeviceOwner) => {
            iot::device_owner(state, &event.device_id)?
        }
        _ => sender,
    };
    state.debit(gas_payer, cost)?;
    state.credit(*proposer, cost)?;
    state.account_mut(sender).nonce += 1;

    let now = state.now;
    match &tx.payload {
        ContractCall::PlainTransfer { to, amount } => {
            state.debit(sender, *amount)?;
            state.credit(*to, *amount)?;
            Ok(Outcome::Transferred {
                to: *to,
                amount: *amount,
            })
        }
        ContractCall::RegisterUser { kyc_doc_digest } => {
            market::register_user(state, sender, *kyc_doc_digest, now)
                .map(|user| Outcome::UserRegistered { user })
        }
        ContractCall::AttestKyc {
            user,
            attestor_signature,
        } => market::attest_kyc(state, *user, attestor_signature)
            .map(|_| Outcome::KycAttested { user: *user }),
        ContractCall::ListAsset {
            metadata_digest,
            location,
            price_per_tick,
            sensitive,
        } => market::list_asset(
            state,
            sender,
            tx.nonce,
            *metadata_digest,
            *location,
            *price_per_tick,
            *sensitive,
            now,
        )
        .map(|asset_id| Outcome::AssetListed { asset_id }),
        ContractCall::DelistAsset { asset_id } => market::delist_asset(state, sender, asset_id)
            .map(|asset| Outcome::AssetUpdated { asset }),
        ContractCall::SetAvailability { asset_id, window } => {
            market::set_availability(state, sender, asset_id, *window)
                .map(|asset| Outcome::AssetUpdated { asset })
        }
        ContractCall::BookAsset {
            asset_id,
            window,
            deposit,
        } => market::book_asset(state, sender, tx.nonce, asset_id, *window, *deposit, now)
            .map(|booking| Outcome::Booked { booking }),
        ContractCall::CancelBooking { booking_id } => {
            market::cancel_booking(state, sender, booking_id, now).map(|(booking, refund, fee)| {
                Outcome::BookingCancelled {
                    booking,
                    refund,
                    fee,
                }
            })
        }
        ContractCall::SettleBooking {
            booking_id,
            damage_claim,
        } => market::settle_booking(state, sender, booking_id, *damage_claim, now)
            .map(|result| Outcome::Settled { result }),
        ContractCall::TransferAssetOwnership { attestation } => {
            market::transfer_asset_ownership(state, attestation)
                .map(|asset| Outcome::AssetUpdated { asset })
        }
        ContractCall::RegisterDevice {
            asset_id,
            device_public_key,
            tariff,
        } => iot::register_device(state, sender, asset_id, device_public_key, *tariff, now)
            .map(|device| Outcome::DeviceRegistered { device })
            .map_err(TxError::from),
        ContractCall::TransferDeviceOwnership {
            device_id,
            new_owner,
        } => iot::transfer_device_ownership(state, sender, device_id, *new_owner)
            .map(|device| Outcome::DeviceUpdated { device })
            .map_err(TxError::from),
        ContractCall::RecordUsage { event } => iot::record_usage(state, event)
            .map(|_| Outcome::UsageRecorded {
                device_id: event.device_id,
                units: event.units,
            })
            .map_err(TxError::from),
    }
}
