//! IoT devices: registry, signed telemetry, pay-per-use billing and the
//! off-chain lock/unlock capability check.
//!
//! Capabilities are never issued as tokens. A command is authorized purely by
//! reading booking state from a chain snapshot, which is why
//! [`authorize_command`] takes a `&ChainState` and is side-effect free.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::canonical_json;
use crate::consensus::{Network, NetworkError, NodeId};
use crate::keys::{derive_address, digest_bytes, verify_signature, Address, Digest, KeyPair, PublicKey, Signature};
use crate::ledger::ChainState;
use crate::market::{BookingState, Window};
use crate::whisper::{Topic, TopicKey};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IotError {
    #[error("caller is not the owner")]
    NotOwner,
    #[error("device already registered")]
    DuplicateDevice,
    #[error("unknown asset")]
    UnknownAsset,
    #[error("new owner is not registered")]
    UnknownNewOwner,
    #[error("unknown device")]
    UnknownDevice,
    #[error("device signature does not verify")]
    BadDeviceSignature,
    #[error("usage event already recorded")]
    DuplicateUsageEvent,
    #[error("unknown booking")]
    UnknownBooking,
    #[error("device public key is empty")]
    EmptyKey,
    #[error("bill amount overflows")]
    BillOverflow,
}

impl IotError {
    pub fn code(&self) -> &'static str {
        match self {
            IotError::NotOwner => "NotOwner",
            IotError::DuplicateDevice => "DuplicateDevice",
            IotError::UnknownAsset => "UnknownAsset",
            IotError::UnknownNewOwner => "UnknownNewOwner",
            IotError::UnknownDevice => "UnknownDevice",
            IotError::BadDeviceSignature => "BadDeviceSignature",
            IotError::DuplicateUsageEvent => "DuplicateUsageEvent",
            IotError::UnknownBooking => "UnknownBooking",
            IotError::EmptyKey => "EmptyKey",
            IotError::BillOverflow => "BillOverflow",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceRecord {
    /// `digest(device_public_key)`.
    pub device_id: Digest,
    pub owner: Address,
    pub asset_id: Digest,
    pub device_public_key: PublicKey,
    /// Token minor units per usage unit.
    pub tariff: u64,
    pub installed_at: u64,
}

pub fn device_id_for(device_public_key: &PublicKey) -> Digest {
    digest_bytes(&device_public_key.0)
}

/// Signed telemetry. Units are opaque non-negative integers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UsageEvent {
    pub device_id: Digest,
    pub units: u64,
    pub at: u64,
    pub device_signature: Signature,
}

#[derive(Serialize)]
struct UsageBody<'a> {
    device_id: &'a Digest,
    units: u64,
    at: u64,
}

impl UsageEvent {
    pub fn signing_bytes(device_id: &Digest, units: u64, at: u64) -> Vec<u8> {
        canonical_json(&UsageBody {
            device_id,
            units,
            at,
        })
    }

    pub fn signed(device: &KeyPair, units: u64, at: u64) -> Self {
        let device_id = device_id_for(&device.public_key);
        let device_signature = device.sign(&Self::signing_bytes(&device_id, units, at));
        UsageEvent {
            device_id,
            units,
            at,
            device_signature,
        }
    }

    pub fn digest(&self) -> Digest {
        digest_bytes(&canonical_json(self))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    Lock,
    Unlock,
}

/// A lock/unlock request, carried over the whisper bus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandMessage {
    pub kind: CommandKind,
    pub device_id: Digest,
    pub booking_id: Digest,
    pub issued_at: u64,
    pub issuer: Address,
    pub issuer_key: PublicKey,
    pub signature: Signature,
}

#[derive(Serialize)]
struct CommandBody<'a> {
    kind: CommandKind,
    device_id: &'a Digest,
    booking_id: &'a Digest,
    issued_at: u64,
    issuer: &'a Address,
    issuer_key: &'a PublicKey,
}

impl CommandMessage {
    pub fn signing_bytes(&self) -> Vec<u8> {
        canonical_json(&CommandBody {
            kind: self.kind,
            device_id: &self.device_id,
            booking_id: &self.booking_id,
            issued_at: self.issued_at,
            issuer: &self.issuer,
            issuer_key: &self.issuer_key,
        })
    }

    pub fn signed(
        issuer: &KeyPair,
        kind: CommandKind,
        device_id: Digest,
        booking_id: Digest,
        issued_at: u64,
    ) -> Self {
        let mut cmd = CommandMessage {
            kind,
            device_id,
            booking_id,
            issued_at,
            issuer: issuer.address(),
            issuer_key: issuer.public_key.clone(),
            signature: Signature(Vec::new()),
        };
        cmd.signature = issuer.sign(&cmd.signing_bytes());
        cmd
    }

    pub fn signature_valid(&self) -> bool {
        derive_address(&self.issuer_key.0).ok() == Some(self.issuer)
            && verify_signature(&self.issuer_key.0, &self.signing_bytes(), &self.signature.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    BadSignature,
    NoSuchBooking,
    UnknownDevice,
    DeviceMismatch,
    NotTenant,
    OutsideWindow,
    BookingNotActive,
    OwnerLockedOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", content = "reason", rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject(RejectReason),
}

impl Decision {
    pub fn is_accept(&self) -> bool {
        matches!(self, Decision::Accept)
    }
}

/// Decides a command at tick `now` against a chain snapshot.
///
/// Accepts iff the signature verifies, the booking is Active on the device's
/// asset, `now` falls inside its window, and the issuer is the tenant. The
/// asset owner is locked out while a tenancy covers `now`.
pub fn authorize_command(state: &ChainState, command: &CommandMessage, now: u64) -> Decision {
    use RejectReason::*;
    if !command.signature_valid() {
        return Decision::Reject(BadSignature);
    }
    let Some(booking) = state.bookings.get(&command.booking_id) else {
        return Decision::Reject(NoSuchBooking);
    };
    let Some(device) = state.devices.get(&command.device_id) else {
        return Decision::Reject(UnknownDevice);
    };
    if device.asset_id != booking.asset_id {
        return Decision::Reject(DeviceMismatch);
    }
    let covers = booking.window.contains_tick(now);
    // A due Reserved booking is activated by the next block; the snapshot may lag.
    let active = match booking.state {
        BookingState::Active => true,
        BookingState::Reserved => booking.window.start <= now,
        BookingState::Settled | BookingState::Cancelled => false,
    };
    if command.issuer == booking.tenant {
        if !covers {
            return Decision::Reject(OutsideWindow);
        }
        if !active {
            return Decision::Reject(BookingNotActive);
        }
        return Decision::Accept;
    }
    let owner = state.assets.get(&booking.asset_id).map(|a| a.owner);
    if owner == Some(command.issuer) && active && covers {
        return Decision::Reject(OwnerLockedOut);
    }
    Decision::Reject(NotTenant)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BillStatement {
    pub booking_id: Digest,
    pub device_id: Digest,
    pub total_units: u64,
    pub tariff: u64,
    pub amount: u64,
    pub window: Window,
}

/// One statement per device installed on the booking's asset, ordered by
/// device id, covering events with `window.start <= at < window.end`.
pub fn compute_bill(state: &ChainState, booking_id: &Digest) -> Result<Vec<BillStatement>, IotError> {
    let booking = state
        .bookings
        .get(booking_id)
        .ok_or(IotError::UnknownBooking)?;
    let mut out = Vec::new();
    for device in state
        .devices
        .values()
        .filter(|d| d.asset_id == booking.asset_id)
    {
        let total_units = state
            .usage
            .get(&device.device_id)
            .into_iter()
            .flatten()
            .filter(|e| booking.window.contains_tick(e.at))
            .try_fold(0u64, |acc, e| acc.checked_add(e.units))
            .ok_or(IotError::BillOverflow)?;
        let amount = total_units
            .checked_mul(device.tariff)
            .ok_or(IotError::BillOverflow)?;
        out.push(BillStatement {
            booking_id: *booking_id,
            device_id: device.device_id,
            total_units,
            tariff: device.tariff,
            amount,
            window: booking.window,
        });
    }
    Ok(out)
}

pub(crate) fn register_device(
    state: &mut ChainState,
    caller: Address,
    asset_id: &Digest,
    device_public_key: &PublicKey,
    tariff: u64,
    now: u64,
) -> Result<DeviceRecord, IotError> {
    if device_public_key.0.is_empty() {
        return Err(IotError::EmptyKey);
    }
    let asset = state.assets.get(asset_id).ok_or(IotError::UnknownAsset)?;
    if asset.owner != caller {
        return Err(IotError::NotOwner);
    }
    let device_id = device_id_for(device_public_key);
    if state.devices.contains_key(&device_id) {
        return Err(IotError::DuplicateDevice);
    }
    let record = DeviceRecord {
        device_id,
        owner: caller,
        asset_id: *asset_id,
        device_public_key: device_public_key.clone(),
        tariff,
        installed_at: now,
    };
    state.devices.insert(device_id, record.clone());
    Ok(record)
}

pub(crate) fn transfer_device_ownership(
    state: &mut ChainState,
    caller: Address,
    device_id: &Digest,
    new_owner: Address,
) -> Result<DeviceRecord, IotError> {
    let device = state.devices.get(device_id).ok_or(IotError::UnknownDevice)?;
    if device.owner != caller {
        return Err(IotError::NotOwner);
    }
    if !state.users.contains_key(&new_owner) {
        return Err(IotError::UnknownNewOwner);
    }
    let device = state.devices.get_mut(device_id).expect("checked");
    device.owner = new_owner;
    Ok(device.clone())
}

pub(crate) fn device_owner(state: &ChainState, device_id: &Digest) -> Result<Address, IotError> {
    state
        .devices
        .get(device_id)
        .map(|d| d.owner)
        .ok_or(IotError::UnknownDevice)
}

pub(crate) fn record_usage(state: &mut ChainState, event: &UsageEvent) -> Result<(), IotError> {
    let device = state
        .devices
        .get(&event.device_id)
        .ok_or(IotError::UnknownDevice)?;
    let message = UsageEvent::signing_bytes(&event.device_id, event.units, event.at);
    if !verify_signature(&device.device_public_key.0, &message, &event.device_signature.0) {
        return Err(IotError::BadDeviceSignature);
    }
    if !state.usage_seen.insert(event.digest()) {
        return Err(IotError::DuplicateUsageEvent);
    }
    state
        .usage
        .entry(event.device_id)
        .or_default()
        .push(event.clone());
    Ok(())
}

/// Whisper topic a device listens on: the first four bytes of its id.
pub fn device_topic(device_id: &Digest) -> Topic {
    Topic([device_id.0[0], device_id.0[1], device_id.0[2], device_id.0[3]])
}

/// Outcome of one command a device agent pulled off the bus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandOutcome {
    pub at: u64,
    pub command: Option<CommandMessage>,
    pub decision: Option<Decision>,
    /// Set when the payload did not decode as a command.
    pub error: Option<String>,
}

/// Device-side listener: subscribes to the device topic on its host node and
/// evaluates incoming commands against that node's chain snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceAgent {
    pub device_id: Digest,
    pub node: NodeId,
    pub topic: Topic,
    pub key: TopicKey,
    /// Current lock state, driven by accepted commands.
    pub unlocked: bool,
}

impl DeviceAgent {
    pub fn attach(
        network: &mut Network,
        node: NodeId,
        device_id: Digest,
        key: TopicKey,
    ) -> Result<Self, NetworkError> {
        let topic = device_topic(&device_id);
        network.subscribe(node, topic, key)?;
        Ok(DeviceAgent {
            device_id,
            node,
            topic,
            key,
            unlocked: false,
        })
    }

    /// Drains the node's matching envelopes and decides each command.
    pub fn poll(&mut self, network: &mut Network) -> Result<Vec<CommandOutcome>, NetworkError> {
        let now = network.now();
        let messages = network.collect_topic(self.node, self.topic)?;
        let state = network.node_state(self.node)?;
        let mut out = Vec::new();
        for (_, payload) in messages {
            let outcome = match serde_json::from_slice::<CommandMessage>(&payload) {
                Ok(cmd) if cmd.device_id != self.device_id => CommandOutcome {
                    at: now,
                    command: Some(cmd),
                    decision: Some(Decision::Reject(RejectReason::DeviceMismatch)),
                    error: None,
                },
                Ok(cmd) => {
                    let decision = authorize_command(state, &cmd, now);
                    if decision.is_accept() {
                        self.unlocked = cmd.kind == CommandKind::Unlock;
                    }
                    CommandOutcome {
                        at: now,
                        command: Some(cmd),
                        decision: Some(decision),
                        error: None,
                    }
                }
                Err(e) => CommandOutcome {
                    at: now,
                    command: None,
                    decision: None,
                    error: Some(e.to_string()),
                },
            };
            out.push(outcome);
        }
        Ok(out)
    }
}
