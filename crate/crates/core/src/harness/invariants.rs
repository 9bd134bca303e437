use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::codec::canonical_json;
use crate::consensus::{Network, TraceEvent};
use crate::ledger::{encode_chain, verify_chain, ChainState};
use crate::market::BookingState;

use super::CommandRecord;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantResult {
    pub name: String,
    pub passed: bool,
    pub detail: Option<String>,
}

fn result(name: &str, failure: Option<String>) -> InvariantResult {
    InvariantResult {
        name: name.to_string(),
        passed: failure.is_none(),
        detail: failure,
    }
}

/// Runs every invariant suite against a drained network.
pub fn check_invariants(
    net: &Network,
    commands: &[CommandRecord],
    trace: &[TraceEvent],
    sentinels: &[String],
    artifacts: &[PathBuf],
) -> Vec<InvariantResult> {
    let supply = net.genesis().genesis.as_ref().map_or(0, |g| g.supply());
    let (_, head) = net.canonical_head();
    let canonical = net
        .nodes()
        .iter()
        .find(|n| n.head_digest() == head)
        .expect("canonical head belongs to a node")
        .state();

    let conservation = net
        .nodes()
        .iter()
        .find(|n| n.state().total_supply() != supply)
        .map(|n| format!("node {} holds {} of {supply}", n.id, n.state().total_supply()));

    let agreement = (!net.heads_agree()).then(|| {
        let heads: Vec<String> = net
            .nodes()
            .iter()
            .map(|n| format!("{}@{}", n.head_digest(), n.height()))
            .collect();
        format!("heads differ: {}", heads.join(", "))
    });

    let rules = net.chain_rules();
    let replay = net.nodes().iter().find_map(|n| match verify_chain(n.chain(), &rules) {
        Err(f) => Some(format!("node {}: {f}", n.id)),
        Ok(s) if s.digest() != n.state().digest() => Some(format!("node {}: replay digest differs", n.id)),
        Ok(_) => None,
    });

    vec![
        result("conservation", conservation),
        result("agreement", agreement),
        result("replay_determinism", replay),
        result("booking_disjointness", booking_overlap(canonical)),
        result("escrow_backing", escrow_mismatch(canonical)),
        result("settlement_conservation", settlement_mismatch(canonical)),
        result("billing_exactness", billing_mismatch(canonical)),
        result("capability_soundness", unsound_accept(canonical, commands)),
        result("owner_lockout", owner_accepted(canonical, commands)),
        result("privacy", privacy_leak(net, trace, sentinels, artifacts)),
    ]
}

fn booking_overlap(state: &ChainState) -> Option<String> {
    let live: Vec<_> = state
        .bookings
        .values()
        .filter(|b| b.state != BookingState::Cancelled)
        .collect();
    for (i, a) in live.iter().enumerate() {
        for b in &live[i + 1..] {
            if a.asset_id == b.asset_id && a.window.overlaps(&b.window) {
                return Some(format!("bookings {} and {} overlap", a.booking_id, b.booking_id));
            }
        }
    }
    None
}

fn escrow_mismatch(state: &ChainState) -> Option<String> {
    state.accounts.values().find_map(|acct| {
        let held: u128 = state
            .bookings
            .values()
            .filter(|b| b.is_open() && b.tenant == acct.address)
            .map(|b| b.escrow() as u128)
            .sum();
        (held != acct.locked as u128)
            .then(|| format!("{} has {} locked but {held} in open bookings", acct.address, acct.locked))
    })
}

fn settlement_mismatch(state: &ChainState) -> Option<String> {
    state.settlements.values().find_map(|s| {
        let booking = state.bookings.get(&s.booking_id)?;
        let paid_in = booking.rent as u128 + booking.deposit as u128 + s.usage_collected as u128;
        let paid_out = s.owner_credit as u128 + s.tenant_refund as u128;
        let exact = paid_in == paid_out && s.usage_collected + s.usage_shortfall == s.usage_bill;
        (!exact).then(|| format!("settlement {} does not balance", s.booking_id))
    })
}

fn billing_mismatch(state: &ChainState) -> Option<String> {
    state.bookings.values().find_map(|b| {
        let bills = state.compute_bill(&b.booking_id).ok()?;
        let devices: Vec<_> = state.devices.values().filter(|d| d.asset_id == b.asset_id).collect();
        if bills.len() != devices.len() {
            return Some(format!("booking {}: statement count differs", b.booking_id));
        }
        bills.iter().zip(devices).find_map(|(bill, dev)| {
            let units: u128 = state
                .usage
                .get(&dev.device_id)
                .into_iter()
                .flatten()
                .filter(|e| b.window.start <= e.at && e.at < b.window.end)
                .map(|e| e.units as u128)
                .sum();
            let ok = bill.device_id == dev.device_id
                && bill.total_units as u128 == units
                && bill.amount as u128 == units * dev.tariff as u128;
            (!ok).then(|| format!("booking {}: bill for {} differs", b.booking_id, dev.device_id))
        })
    })
}

fn unsound_accept(state: &ChainState, commands: &[CommandRecord]) -> Option<String> {
    commands.iter().filter(|c| c.decision.is_accept()).find_map(|c| {
        let ok = state.bookings.get(&c.booking).is_some_and(|b| {
            b.tenant == c.issuer
                && b.window.contains_tick(c.decided_at)
                && matches!(b.state, BookingState::Active | BookingState::Settled)
                && state.devices.get(&c.device).is_some_and(|d| d.asset_id == b.asset_id)
        });
        (!ok).then(|| format!("command by {} at tick {} has no covering tenancy", c.issuer, c.decided_at))
    })
}

fn owner_accepted(state: &ChainState, commands: &[CommandRecord]) -> Option<String> {
    commands.iter().filter(|c| c.decision.is_accept()).find_map(|c| {
        let booking = state.bookings.get(&c.booking)?;
        let owner = state.assets.get(&booking.asset_id)?.owner;
        (c.issuer == owner && c.issuer != booking.tenant)
            .then(|| format!("owner command accepted at tick {}", c.decided_at))
    })
}

fn privacy_leak(
    net: &Network,
    trace: &[TraceEvent],
    sentinels: &[String],
    artifacts: &[PathBuf],
) -> Option<String> {
    if sentinels.is_empty() {
        return None;
    }
    let mut blobs: Vec<(String, Vec<u8>)> = net
        .nodes()
        .iter()
        .map(|n| (format!("chain of {}", n.id), encode_chain(n.chain())))
        .collect();
    blobs.push(("snapshot".into(), canonical_json(&net.snapshot())));
    blobs.push(("trace".into(), canonical_json(trace)));
    for path in artifacts {
        if let Ok(bytes) = std::fs::read(path) {
            blobs.push((path.display().to_string(), bytes));
        }
    }
    for (name, bytes) in &blobs {
        for s in sentinels {
            if bytes.windows(s.len()).any(|w| w == s.as_bytes()) {
                return Some(format!("{name} contains a profile string"));
            }
        }
    }
    None
}
