//! Rental contracts: users, KYC, listings, availability, escrow-backed
//! bookings, settlement and registry-driven ownership changes.
//!
//! Everything here except [`query_assets`] runs inside
//! [`crate::ledger::apply_transaction`] and mutates a scratch copy of the
//! state, so an early return never leaks a partial update.

mod query;
mod window;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::iot::{self, BillStatement};
use crate::keys::{digest_parts, verify_signature, Address, Digest, Signature};
use crate::ledger::{ChainState, TxError};

pub use query::{query_assets, AssetFilter, BoundingBox, QueryError};
pub use window::{insert_merged, Window};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MarketError {
    #[error("caller is already registered")]
    AlreadyRegistered,
    #[error("unknown user")]
    UnknownUser,
    #[error("attestation signature does not verify")]
    BadAttestation,
    #[error("caller is not registered")]
    NotRegistered,
    #[error("KYC attestation required for sensitive assets")]
    KycRequired,
    #[error("caller is not the owner")]
    NotOwner,
    #[error("asset has a reserved or active booking")]
    ActiveBookingExists,
    #[error("window end must be after start")]
    BadWindow,
    #[error("window is not available")]
    WindowUnavailable,
    #[error("asset is not listed")]
    AssetNotListed,
    #[error("unknown asset")]
    UnknownAsset,
    #[error("unknown booking")]
    UnknownBooking,
    #[error("caller is not the tenant")]
    NotTenant,
    #[error("booking window has already started")]
    AlreadyStarted,
    #[error("booking window has not ended yet")]
    TooEarly,
    #[error("damage claim exceeds deposit")]
    ClaimExceedsDeposit,
    #[error("booking is not active")]
    NotActive,
    #[error("booking is already closed")]
    BookingClosed,
    #[error("new owner is not registered")]
    UnknownNewOwner,
    #[error("asset has an active tenancy")]
    ActiveTenancy,
    #[error("location out of range")]
    BadLocation,
}

impl MarketError {
    pub fn code(&self) -> &'static str {
        match self {
            MarketError::AlreadyRegistered => "AlreadyRegistered",
            MarketError::UnknownUser => "UnknownUser",
            MarketError::BadAttestation => "BadAttestation",
            MarketError::NotRegistered => "NotRegistered",
            MarketError::KycRequired => "KycRequired",
            MarketError::NotOwner => "NotOwner",
            MarketError::ActiveBookingExists => "ActiveBookingExists",
            MarketError::BadWindow => "BadWindow",
            MarketError::WindowUnavailable => "WindowUnavailable",
            MarketError::AssetNotListed => "AssetNotListed",
            MarketError::UnknownAsset => "UnknownAsset",
            MarketError::UnknownBooking => "UnknownBooking",
            MarketError::NotTenant => "NotTenant",
            MarketError::AlreadyStarted => "AlreadyStarted",
            MarketError::TooEarly => "TooEarly",
            MarketError::ClaimExceedsDeposit => "ClaimExceedsDeposit",
            MarketError::NotActive => "NotActive",
            MarketError::BookingClosed => "BookingClosed",
            MarketError::UnknownNewOwner => "UnknownNewOwner",
            MarketError::ActiveTenancy => "ActiveTenancy",
            MarketError::BadLocation => "BadLocation",
        }
    }
}

/// On-chain user entry. Holds a document digest, never the documents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserRecord {
    pub address: Address,
    pub kyc_doc_digest: Digest,
    pub kyc_attested: bool,
    pub registered_at: u64,
}

/// Latitude/longitude in millionths of a degree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Location {
    pub lat_e6: i64,
    pub lon_e6: i64,
}

impl Location {
    pub fn from_degrees(lat: f64, lon: f64) -> Self {
        Location {
            lat_e6: (lat * 1e6).round() as i64,
            lon_e6: (lon * 1e6).round() as i64,
        }
    }

    pub fn is_valid(&self) -> bool {
        (-90_000_000..=90_000_000).contains(&self.lat_e6)
            && (-180_000_000..=180_000_000).contains(&self.lon_e6)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetStatus {
    Listed,
    Delisted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetRecord {
    pub asset_id: Digest,
    pub owner: Address,
    pub metadata_digest: Digest,
    pub location: Location,
    pub price_per_tick: u64,
    pub sensitive: bool,
    pub status: AssetStatus,
    /// Sorted, pairwise-disjoint, non-touching windows.
    pub availability: Vec<Window>,
    pub listed_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BookingState {
    Reserved,
    Active,
    Settled,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Booking {
    pub booking_id: Digest,
    pub asset_id: Digest,
    pub tenant: Address,
    pub window: Window,
    pub rent: u64,
    pub deposit: u64,
    pub state: BookingState,
    pub created_at: u64,
}

impl Booking {
    /// Reserved or Active.
    pub fn is_open(&self) -> bool {
        matches!(self.state, BookingState::Reserved | BookingState::Active)
    }

    pub fn escrow(&self) -> u64 {
        self.rent + self.deposit
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettlementResult {
    pub booking_id: Digest,
    pub owner: Address,
    /// rent + damage withheld + usage collected.
    pub owner_credit: u64,
    /// deposit − damage withheld, before the usage charge.
    pub tenant_refund: u64,
    pub damage_withheld: u64,
    pub usage_bill: u64,
    /// Portion of the usage bill actually recovered from the tenant.
    pub usage_collected: u64,
    pub usage_shortfall: u64,
    pub bills: Vec<BillStatement>,
}

/// Registry-signed statement that `asset_id` now belongs to `new_owner`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OwnershipAttestation {
    pub asset_id: Digest,
    pub new_owner: Address,
    pub registrar_signature: Signature,
}

impl OwnershipAttestation {
    pub fn message(asset_id: &Digest, new_owner: &Address) -> Vec<u8> {
        [asset_id.0.as_slice(), new_owner.0.as_slice()].concat()
    }
}

/// Bytes an attestor signs to vouch for a user's KYC documents.
pub fn kyc_attestation_message(user: &Address, kyc_doc_digest: &Digest) -> Vec<u8> {
    [user.0.as_slice(), kyc_doc_digest.0.as_slice()].concat()
}

/// `digest(owner ‖ nonce)`.
pub fn asset_id_for(owner: &Address, nonce: u64) -> Digest {
    digest_parts(&[&owner.0, &nonce.to_be_bytes()])
}

pub fn booking_id_for(tenant: &Address, nonce: u64) -> Digest {
    digest_parts(&[b"booking", &tenant.0, &nonce.to_be_bytes()])
}

pub fn rent_for(price_per_tick: u64, window: &Window) -> Option<u64> {
    price_per_tick.checked_mul(window.len())
}

fn market<T>(e: MarketError) -> Result<T, TxError> {
    Err(TxError::Market(e))
}

pub(crate) fn register_user(
    state: &mut ChainState,
    caller: Address,
    kyc_doc_digest: Digest,
    now: u64,
) -> Result<UserRecord, TxError> {
    if state.users.contains_key(&caller) {
        return market(MarketError::AlreadyRegistered);
    }
    let record = UserRecord {
        address: caller,
        kyc_doc_digest,
        kyc_attested: false,
        registered_at: now,
    };
    state.users.insert(caller, record.clone());
    Ok(record)
}

pub(crate) fn attest_kyc(
    state: &mut ChainState,
    user: Address,
    attestor_signature: &Signature,
) -> Result<(), TxError> {
    let Some(record) = state.users.get(&user) else {
        return market(MarketError::UnknownUser);
    };
    let message = kyc_attestation_message(&user, &record.kyc_doc_digest);
    let valid = state
        .params
        .attestor_key
        .as_ref()
        .is_some_and(|key| verify_signature(&key.0, &message, &attestor_signature.0));
    if !valid {
        return market(MarketError::BadAttestation);
    }
    state.users.get_mut(&user).expect("checked").kyc_attested = true;
    state.account_mut(user).kyc_attested = true;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn list_asset(
    state: &mut ChainState,
    caller: Address,
    nonce: u64,
    metadata_digest: Digest,
    location: Location,
    price_per_tick: u64,
    sensitive: bool,
    now: u64,
) -> Result<Digest, TxError> {
    let Some(user) = state.users.get(&caller) else {
        return market(MarketError::NotRegistered);
    };
    if sensitive && !user.kyc_attested {
        return market(MarketError::KycRequired);
    }
    if !location.is_valid() {
        return market(MarketError::BadLocation);
    }
    let asset_id = asset_id_for(&caller, nonce);
    state.assets.insert(
        asset_id,
        AssetRecord {
            asset_id,
            owner: caller,
            metadata_digest,
            location,
            price_per_tick,
            sensitive,
            status: AssetStatus::Listed,
            availability: Vec::new(),
            listed_at: now,
        },
    );
    Ok(asset_id)
}

fn owned_asset<'a>(
    state: &'a mut ChainState,
    caller: &Address,
    asset_id: &Digest,
) -> Result<&'a mut AssetRecord, TxError> {
    let asset = state
        .assets
        .get_mut(asset_id)
        .ok_or(TxError::Market(MarketError::UnknownAsset))?;
    if asset.owner != *caller {
        return market(MarketError::NotOwner);
    }
    Ok(asset)
}

fn bookings_for<'a>(state: &'a ChainState, asset_id: &'a Digest) -> impl Iterator<Item = &'a Booking> {
    state
        .bookings
        .values()
        .filter(move |b| b.asset_id == *asset_id)
}

pub(crate) fn delist_asset(
    state: &mut ChainState,
    caller: Address,
    asset_id: &Digest,
) -> Result<AssetRecord, TxError> {
    owned_asset(state, &caller, asset_id)?;
    if bookings_for(state, asset_id).any(Booking::is_open) {
        return market(MarketError::ActiveBookingExists);
    }
    let asset = owned_asset(state, &caller, asset_id)?;
    asset.status = AssetStatus::Delisted;
    asset.availability.clear();
    Ok(asset.clone())
}

pub(crate) fn set_availability(
    state: &mut ChainState,
    caller: Address,
    asset_id: &Digest,
    window: Window,
) -> Result<AssetRecord, TxError> {
    let asset = owned_asset(state, &caller, asset_id)?;
    if !window.is_valid() {
        return market(MarketError::BadWindow);
    }
    if asset.status != AssetStatus::Listed {
        return market(MarketError::AssetNotListed);
    }
    insert_merged(&mut asset.availability, window);
    Ok(asset.clone())
}

/// Checks every booking precondition that does not depend on the caller's
/// balance and returns the rent.
fn check_bookable(
    state: &ChainState,
    asset_id: &Digest,
    window: &Window,
) -> Result<u64, TxError> {
    let asset = state
        .assets
        .get(asset_id)
        .ok_or(TxError::Market(MarketError::UnknownAsset))?;
    if asset.status != AssetStatus::Listed {
        return market(MarketError::AssetNotListed);
    }
    if !window.is_valid() {
        return market(MarketError::BadWindow);
    }
    if !asset.availability.iter().any(|a| a.covers(window)) {
        return market(MarketError::WindowUnavailable);
    }
    if bookings_for(state, asset_id)
        .filter(|b| b.state != BookingState::Cancelled)
        .any(|b| b.window.overlaps(window))
    {
        return market(MarketError::WindowUnavailable);
    }
    rent_for(asset.price_per_tick, window).ok_or(TxError::Overflow)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn book_asset(
    state: &mut ChainState,
    caller: Address,
    nonce: u64,
    asset_id: &Digest,
    window: Window,
    deposit: u64,
    now: u64,
) -> Result<Booking, TxError> {
    let rent = check_bookable(state, asset_id, &window)?;
    let escrow = rent.checked_add(deposit).ok_or(TxError::Overflow)?;
    state.lock(caller, escrow)?;
    let booking = Booking {
        booking_id: booking_id_for(&caller, nonce),
        asset_id: *asset_id,
        tenant: caller,
        window,
        rent,
        deposit,
        state: BookingState::Reserved,
        created_at: now,
    };
    state.bookings.insert(booking.booking_id, booking.clone());
    Ok(booking)
}

/// Moves every due Reserved booking to Active.
pub fn activate_bookings(state: &mut ChainState, tick: u64) -> Vec<Digest> {
    let mut activated = Vec::new();
    for booking in state.bookings.values_mut() {
        if booking.state == BookingState::Reserved && booking.window.start <= tick {
            booking.state = BookingState::Active;
            activated.push(booking.booking_id);
        }
    }
    activated
}

pub(crate) fn cancel_booking(
    state: &mut ChainState,
    caller: Address,
    booking_id: &Digest,
    now: u64,
) -> Result<(Booking, u64, u64), TxError> {
    let booking = state
        .bookings
        .get(booking_id)
        .ok_or(TxError::Market(MarketError::UnknownBooking))?
        .clone();
    if booking.tenant != caller {
        return market(MarketError::NotTenant);
    }
    match booking.state {
        BookingState::Reserved if now < booking.window.start => {}
        BookingState::Reserved | BookingState::Active => return market(MarketError::AlreadyStarted),
        BookingState::Settled | BookingState::Cancelled => {
            return market(MarketError::BookingClosed)
        }
    }
    let owner = state
        .assets
        .get(&booking.asset_id)
        .map(|a| a.owner)
        .ok_or(TxError::Market(MarketError::UnknownAsset))?;
    let escrow = booking.escrow();
    let fee = (escrow as u128 * state.params.cancellation_fee_bps.min(10_000) as u128 / 10_000) as u64;
    let refund = escrow - fee;
    state.release_locked(caller, escrow)?;
    state.credit(caller, refund)?;
    state.credit(owner, fee)?;
    let stored = state.bookings.get_mut(booking_id).expect("checked");
    stored.state = BookingState::Cancelled;
    Ok((stored.clone(), refund, fee))
}

pub(crate) fn settle_booking(
    state: &mut ChainState,
    caller: Address,
    booking_id: &Digest,
    damage_claim: u64,
    now: u64,
) -> Result<SettlementResult, TxError> {
    let booking = state
        .bookings
        .get(booking_id)
        .ok_or(TxError::Market(MarketError::UnknownBooking))?
        .clone();
    let owner = state
        .assets
        .get(&booking.asset_id)
        .map(|a| a.owner)
        .ok_or(TxError::Market(MarketError::UnknownAsset))?;
    if owner != caller {
        return market(MarketError::NotOwner);
    }
    if booking.state != BookingState::Active {
        return market(MarketError::NotActive);
    }
    if now < booking.window.end {
        return market(MarketError::TooEarly);
    }
    if damage_claim > booking.deposit {
        return market(MarketError::ClaimExceedsDeposit);
    }

    let bills = iot::compute_bill(state, booking_id)?;
    let usage_bill = bills
        .iter()
        .try_fold(0u64, |acc, b| acc.checked_add(b.amount))
        .ok_or(TxError::Overflow)?;
    let tenant_refund = booking.deposit - damage_claim;

    // Usage comes out of the tenant's balance first, then the refund.
    let tenant = booking.tenant;
    state.release_locked(tenant, booking.escrow())?;
    let available = state.balance(&tenant) as u128 + tenant_refund as u128;
    let usage_collected = (usage_bill as u128).min(available) as u64;
    let usage_shortfall = usage_bill - usage_collected;
    let owner_credit = booking
        .rent
        .checked_add(damage_claim)
        .and_then(|v| v.checked_add(usage_collected))
        .ok_or(TxError::Overflow)?;

    state.credit(tenant, tenant_refund)?;
    state.debit(tenant, usage_collected)?;
    state.credit(owner, owner_credit)?;

    let result = SettlementResult {
        booking_id: *booking_id,
        owner,
        owner_credit,
        tenant_refund,
        damage_withheld: damage_claim,
        usage_bill,
        usage_collected,
        usage_shortfall,
        bills,
    };
    state.bookings.get_mut(booking_id).expect("checked").state = BookingState::Settled;
    state.settlements.insert(*booking_id, result.clone());
    Ok(result)
}

pub(crate) fn transfer_asset_ownership(
    state: &mut ChainState,
    attestation: &OwnershipAttestation,
) -> Result<AssetRecord, TxError> {
    if !state.assets.contains_key(&attestation.asset_id) {
        return market(MarketError::UnknownAsset);
    }
    let message = OwnershipAttestation::message(&attestation.asset_id, &attestation.new_owner);
    let valid = state.params.registrar_key.as_ref().is_some_and(|key| {
        verify_signature(&key.0, &message, &attestation.registrar_signature.0)
    });
    if !valid {
        return market(MarketError::BadAttestation);
    }
    if !state.users.contains_key(&attestation.new_owner) {
        return market(MarketError::UnknownNewOwner);
    }
    if bookings_for(state, &attestation.asset_id).any(|b| b.state == BookingState::Active) {
        return market(MarketError::ActiveTenancy);
    }
    let asset = state.assets.get_mut(&attestation.asset_id).expect("checked");
    asset.owner = attestation.new_owner;
    Ok(asset.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{ContractCall, Outcome};
    use crate::testkit::{addr, kp, World, ATTESTOR, REGISTRAR};
    use proptest::prelude::*;

    const OWNER: u64 = 10;
    const TENANT: u64 = 11;
    const STRANGER: u64 = 12;
    const LOCK: u64 = 30;

    fn code(r: Result<impl std::fmt::Debug, TxError>) -> &'static str {
        r.map(|_| ()).unwrap_err().code()
    }

    /// Owner lists at 5/tick, opens [0,100); tenant holds 100 after registering.
    fn market() -> (World, Digest) {
        let mut w = World::new(&[(OWNER, 1_000), (TENANT, 101), (STRANGER, 100)]);
        w.register(OWNER);
        w.register(TENANT);
        let asset = w.list(OWNER, 5);
        w.open(OWNER, asset, 0, 100);
        (w, asset)
    }

    fn settle(w: &mut World, booking_id: Digest, damage_claim: u64) -> Result<SettlementResult, TxError> {
        match w.exec(OWNER, ContractCall::SettleBooking { booking_id, damage_claim })? {
            Outcome::Settled { result } => Ok(result),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn registration_stores_only_the_digest() {
        let mut w = World::new(&[(TENANT, 10)]);
        w.register(TENANT);
        let user = &w.state.users[&addr(TENANT)];
        assert!(!user.kyc_attested);
        let doc = crate::keys::digest_bytes(b"docs-11");
        assert_eq!(user.kyc_doc_digest, doc);
        let again = w.exec(TENANT, ContractCall::RegisterUser { kyc_doc_digest: doc });
        assert_eq!(code(again), "AlreadyRegistered");
        let json = String::from_utf8(crate::codec::canonical_json(&w.state)).unwrap();
        assert!(!json.contains("docs-11"));
    }

    #[test]
    fn kyc_attestation() {
        let mut w = World::new(&[(TENANT, 10), (ATTESTOR, 10), (STRANGER, 10)]);
        w.register(TENANT);
        let user = addr(TENANT);
        let msg = kyc_attestation_message(&user, &w.state.users[&user].kyc_doc_digest);
        let forged = ContractCall::AttestKyc {
            user,
            attestor_signature: kp(STRANGER).sign(&msg),
        };
        assert_eq!(code(w.exec(STRANGER, forged)), "BadAttestation");
        let unknown = ContractCall::AttestKyc {
            user: addr(STRANGER),
            attestor_signature: kp(ATTESTOR).sign(&msg),
        };
        assert_eq!(code(w.exec(ATTESTOR, unknown)), "UnknownUser");
        w.attest(TENANT);
        assert!(w.state.users[&user].kyc_attested);
        assert!(w.state.account(&user).unwrap().kyc_attested);
    }

    #[test]
    fn sensitive_listing_needs_kyc() {
        let mut w = World::new(&[(OWNER, 100), (ATTESTOR, 10)]);
        let listing = |sensitive| ContractCall::ListAsset {
            metadata_digest: Digest::ZERO,
            location: Location::from_degrees(1.0, 2.0),
            price_per_tick: 1,
            sensitive,
        };
        assert_eq!(code(w.exec(OWNER, listing(false))), "NotRegistered");
        w.register(OWNER);
        assert_eq!(code(w.exec(OWNER, listing(true))), "KycRequired");
        w.attest(OWNER);
        let a = w.exec(OWNER, listing(true)).unwrap();
        let b = w.exec(OWNER, listing(true)).unwrap();
        assert_ne!(a, b);
        assert_eq!(w.state.assets.len(), 2);
        for asset in w.state.assets.values() {
            assert_eq!(asset.status, AssetStatus::Listed);
        }
    }

    #[test]
    fn availability_merges_adjacent_windows() {
        let mut w = World::new(&[(OWNER, 100), (STRANGER, 10)]);
        w.register(OWNER);
        let asset = w.list(OWNER, 1);
        w.open(OWNER, asset, 10, 20);
        assert_eq!(w.state.assets[&asset].availability, vec![Window::new(10, 20)]);
        w.open(OWNER, asset, 20, 30);
        assert_eq!(w.state.assets[&asset].availability, vec![Window::new(10, 30)]);
        let bad = ContractCall::SetAvailability {
            asset_id: asset,
            window: Window::new(5, 5),
        };
        assert_eq!(code(w.exec(OWNER, bad)), "BadWindow");
        let theirs = ContractCall::SetAvailability {
            asset_id: asset,
            window: Window::new(40, 50),
        };
        assert_eq!(code(w.exec(STRANGER, theirs)), "NotOwner");
    }

    #[test]
    fn booking_locks_rent_and_deposit() {
        let (mut w, asset) = market();
        assert_eq!(w.balance(TENANT), 100);
        w.book(TENANT, asset, 10, 20, 20).unwrap();
        assert_eq!(w.locked(TENANT), 70);
        assert_eq!(w.balance(TENANT), 100 - 70 - 5);
        let overlap = w.book(TENANT, asset, 15, 25, 0);
        assert_eq!(code(overlap), "WindowUnavailable");
        let outside = w.book(TENANT, asset, 95, 105, 0);
        assert_eq!(code(outside), "WindowUnavailable");
    }

    #[test]
    fn booking_without_funds_changes_nothing() {
        let mut w = World::new(&[(OWNER, 1_000), (TENANT, 61)]);
        w.register(OWNER);
        w.register(TENANT);
        let asset = w.list(OWNER, 5);
        w.open(OWNER, asset, 0, 100);
        let before = w.state.digest();
        assert_eq!(code(w.book(TENANT, asset, 10, 20, 20)), "InsufficientFunds");
        assert_eq!(w.state.digest(), before);
    }

    #[test]
    fn activation_follows_the_clock() {
        let (mut w, asset) = market();
        let b = w.book(TENANT, asset, 10, 20, 20).unwrap();
        let c = w.book(TENANT, asset, 30, 32, 0).unwrap();
        w.exec(TENANT, ContractCall::CancelBooking { booking_id: c }).unwrap();
        w.at(9);
        assert_eq!(w.state.bookings[&b].state, BookingState::Reserved);
        w.at(10);
        assert_eq!(w.state.bookings[&b].state, BookingState::Active);
        w.at(35);
        assert_eq!(w.state.bookings[&c].state, BookingState::Cancelled);
    }

    #[test]
    fn cancellation_rules() {
        let (mut w, asset) = market();
        let b = w.book(TENANT, asset, 10, 20, 20).unwrap();
        let cancel = ContractCall::CancelBooking { booking_id: b };
        assert_eq!(code(w.exec(OWNER, cancel.clone())), "NotTenant");
        let before = w.balance(TENANT);
        match w.exec(TENANT, cancel.clone()).unwrap() {
            Outcome::BookingCancelled { refund, fee, .. } => assert_eq!((refund, fee), (70, 0)),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(w.balance(TENANT), before + 70 - 1);
        assert_eq!(w.locked(TENANT), 0);

        let b = w.book(TENANT, asset, 10, 20, 20).unwrap();
        w.at(10);
        let late = w.exec(TENANT, ContractCall::CancelBooking { booking_id: b });
        assert_eq!(code(late), "AlreadyStarted");
    }

    #[test]
    fn cancellation_fee_goes_to_owner() {
        let mut params = crate::testkit::default_params();
        params.cancellation_fee_bps = 1_000;
        let mut w = World::with_params(&[(OWNER, 1_000), (TENANT, 101)], params);
        w.register(OWNER);
        w.register(TENANT);
        let asset = w.list(OWNER, 5);
        w.open(OWNER, asset, 0, 100);
        let b = w.book(TENANT, asset, 10, 20, 20).unwrap();
        let owner_before = w.balance(OWNER);
        w.exec(TENANT, ContractCall::CancelBooking { booking_id: b }).unwrap();
        assert_eq!(w.balance(OWNER), owner_before + 7);
    }

    #[test]
    fn delisting_rules() {
        let (mut w, asset) = market();
        let delist = ContractCall::DelistAsset { asset_id: asset };
        assert_eq!(code(w.exec(TENANT, delist.clone())), "NotOwner");
        w.book(TENANT, asset, 10, 20, 0).unwrap();
        w.at(12);
        assert_eq!(code(w.exec(OWNER, delist.clone())), "ActiveBookingExists");

        let other = w.list(OWNER, 1);
        w.open(OWNER, other, 0, 10);
        w.exec(OWNER, ContractCall::DelistAsset { asset_id: other }).unwrap();
        let record = &w.state.assets[&other];
        assert_eq!(record.status, AssetStatus::Delisted);
        assert!(record.availability.is_empty());
        assert_eq!(code(w.book(TENANT, other, 1, 2, 0)), "AssetNotListed");
    }

    #[test]
    fn settlement_with_damage() {
        let (mut w, asset) = market();
        let b = w.book(TENANT, asset, 10, 20, 20).unwrap();
        w.at(10);
        w.at(19);
        assert_eq!(code(settle(&mut w, b, 5)), "TooEarly");
        w.at(20);
        assert_eq!(code(settle(&mut w, b, 25)), "ClaimExceedsDeposit");
        let owner_before = w.balance(OWNER);
        let tenant_before = w.balance(TENANT);
        let r = settle(&mut w, b, 5).unwrap();
        assert_eq!((r.owner_credit, r.tenant_refund, r.usage_bill), (55, 15, 0));
        assert_eq!(w.balance(OWNER), owner_before + 55 - 5);
        assert_eq!(w.balance(TENANT), tenant_before + 15);
        assert_eq!(w.locked(TENANT), 0);
        assert_eq!(code(settle(&mut w, b, 0)), "NotActive");
    }

    #[test]
    fn settlement_collects_usage() {
        let (mut w, asset) = market();
        w.install(OWNER, LOCK, asset, 2);
        let b = w.book(TENANT, asset, 10, 20, 20).unwrap();
        w.at(12);
        w.meter(OWNER, LOCK, 3, 12).unwrap();
        w.meter(OWNER, LOCK, 4, 15).unwrap();
        w.meter(OWNER, LOCK, 9, 20).unwrap();
        w.at(20);
        let tenant_before = w.balance(TENANT);
        let r = settle(&mut w, b, 0).unwrap();
        assert_eq!(r.usage_bill, 14);
        assert_eq!((r.owner_credit, r.tenant_refund, r.usage_collected), (64, 20, 14));
        assert_eq!(w.balance(TENANT), tenant_before + 20 - 14);
    }

    #[test]
    fn unrecoverable_usage_is_reported() {
        let mut w = World::new(&[(OWNER, 1_000), (TENANT, 61)]);
        w.register(OWNER);
        w.register(TENANT);
        let asset = w.list(OWNER, 1);
        w.open(OWNER, asset, 0, 100);
        w.install(OWNER, LOCK, asset, 10);
        let b = w.book(TENANT, asset, 10, 20, 30).unwrap();
        assert_eq!(w.balance(TENANT), 60 - 40 - 5);
        w.at(10);
        w.meter(OWNER, LOCK, 10, 11).unwrap();
        w.at(20);
        let supply = w.state.total_supply();
        let r = settle(&mut w, b, 0).unwrap();
        assert_eq!(r.usage_bill, 100);
        assert_eq!(r.usage_collected, 15 + 30);
        assert_eq!(r.usage_shortfall, 100 - 45);
        assert_eq!(r.owner_credit, 10 + 45);
        assert_eq!(w.balance(TENANT), 0);
        assert_eq!(w.state.total_supply(), supply);
    }

    #[test]
    fn ownership_transfer_redirects_settlement() {
        let (mut w, asset) = market();
        w.register(STRANGER);
        let b = w.book(TENANT, asset, 10, 20, 0).unwrap();
        let attest = |signer: u64, to: u64| ContractCall::TransferAssetOwnership {
            attestation: OwnershipAttestation {
                asset_id: asset,
                new_owner: addr(to),
                registrar_signature: kp(signer).sign(&OwnershipAttestation::message(&asset, &addr(to))),
            },
        };
        assert_eq!(code(w.exec(OWNER, attest(OWNER, STRANGER))), "BadAttestation");
        assert_eq!(code(w.exec(OWNER, attest(REGISTRAR, 99))), "UnknownNewOwner");
        w.exec(OWNER, attest(REGISTRAR, STRANGER)).unwrap();
        assert_eq!(w.state.assets[&asset].owner, addr(STRANGER));

        w.at(10);
        assert_eq!(code(w.exec(OWNER, attest(REGISTRAR, OWNER))), "ActiveTenancy");
        w.at(20);
        let before = w.balance(STRANGER);
        let settle = ContractCall::SettleBooking { booking_id: b, damage_claim: 0 };
        assert_eq!(code(w.exec(OWNER, settle.clone())), "NotOwner");
        w.exec(STRANGER, settle).unwrap();
        assert_eq!(w.balance(STRANGER), before + 50 - 5);
    }

    proptest! {
        #[test]
        fn settlement_balances_exactly(
            price in 0u64..20,
            len in 1u64..20,
            deposit in 0u64..100,
            damage_frac in 0u64..=100,
            tariff in 0u64..20,
            units in proptest::collection::btree_map(0u64..40, 0u64..10, 0..8),
            tenant_extra in 0u64..200,
        ) {
            let rent = price * len;
            let mut w = World::new(&[(OWNER, 10_000), (TENANT, rent + deposit + 6 + tenant_extra)]);
            w.register(OWNER);
            w.register(TENANT);
            let asset = w.list(OWNER, price);
            w.open(OWNER, asset, 0, 100);
            w.install(OWNER, LOCK, asset, tariff);
            let b = w.book(TENANT, asset, 10, 10 + len, deposit).unwrap();
            w.at(10);
            for (at, u) in &units {
                w.meter(OWNER, LOCK, *u, *at).unwrap();
            }
            w.at(10 + len);
            let damage = deposit * damage_frac / 100;
            let supply = w.state.total_supply();
            let tenant_before = w.balance(TENANT) as i128;
            let r = settle(&mut w, b, damage).unwrap();
            let expected_bill: u64 = units
                .iter()
                .filter(|(at, _)| (10..10 + len).contains(*at))
                .map(|(_, u)| u * tariff)
                .sum();
            prop_assert_eq!(r.usage_bill, expected_bill);
            prop_assert_eq!(r.usage_collected + r.usage_shortfall, r.usage_bill);
            let tenant_debit = r.usage_collected as i128;
            prop_assert_eq!(r.owner_credit - damage - rent, r.usage_collected);
            prop_assert_eq!(r.tenant_refund + damage, deposit);
            prop_assert_eq!(w.balance(TENANT) as i128 - tenant_before, r.tenant_refund as i128 - tenant_debit);
            prop_assert_eq!(w.state.total_supply(), supply);
        }
    }
}
