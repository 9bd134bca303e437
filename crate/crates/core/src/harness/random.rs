use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::consensus::{LatencyConfig, NetworkConfig};
use crate::market::Window;

use super::{
    default_command_ttl, default_drain_ticks, Action, ActorSpec, Command, DeviceSpec, LocalProfile,
    ParamsSpec, ScenarioScript,
};

struct Listing {
    label: String,
    owner: String,
}

struct Reservation {
    label: String,
    asset: usize,
    tenant: String,
    window: Window,
}

/// Mixed marketplace workload of `actions` steps, a pure function of `seed`.
/// Each actor carries a profile whose strings are unique sentinels.
pub fn random_script(seed: u64, actions: usize) -> ScenarioScript {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = (0..8).map(|i| format!("u{i}")).collect();
    let actors: BTreeMap<String, ActorSpec> = names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let spec = ActorSpec {
                seed: 100 + i as u64,
                balance: 20_000,
                node: None,
                profile: Some(LocalProfile {
                    name: format!("SENTINEL-NAME-{seed}-{i}"),
                    documents: vec![format!("SENTINEL-PASSPORT-{seed}-{i}")],
                }),
            };
            (n.clone(), spec)
        })
        .collect();
    let devices: BTreeMap<String, DeviceSpec> = (0..4)
        .map(|i| (format!("d{i}"), DeviceSpec { seed: 500 + i, node: i as usize % 4 }))
        .collect();

    let mut out = Vec::with_capacity(actions);
    let mut tick = 0;
    for n in &names {
        out.push(Action {
            tick,
            actor: Some(n.clone()),
            command: Command::Register,
        });
    }
    tick = 4;
    for n in names.iter().skip(2) {
        out.push(Action {
            tick,
            actor: Some("u0".into()),
            command: Command::AttestKyc { user: n.clone() },
        });
    }

    let mut listings: Vec<Listing> = Vec::new();
    let mut reservations: Vec<Reservation> = Vec::new();
    let mut device_asset: BTreeMap<usize, usize> = BTreeMap::new();
    let pick = |rng: &mut ChaCha8Rng| names.choose(rng).expect("actors").clone();

    while out.len() < actions {
        tick += rng.gen_range(0..=1);
        let roll = rng.gen_range(0..100);
        let (actor, command) = if roll < 15 || listings.is_empty() {
            let actor = pick(&mut rng);
            let label = format!("a{}", listings.len());
            listings.push(Listing {
                label: label.clone(),
                owner: actor.clone(),
            });
            let index = listings.len() - 1;
            let cmd = Command::ListAsset {
                label: label.clone(),
                metadata: serde_json::json!({"rooms": rng.gen_range(1..6)}),
                lat: rng.gen_range(-60.0..60.0),
                lon: rng.gen_range(-170.0..170.0),
                price: rng.gen_range(1..8),
                sensitive: index >= devices.len() && rng.gen_bool(0.3),
            };
            if index < devices.len() {
                // The first listings each get a device in the same tick.
                out.push(Action {
                    tick,
                    actor: Some(actor.clone()),
                    command: cmd,
                });
                device_asset.insert(index, index);
                let cmd = Command::RegisterDevice {
                    device: format!("d{index}"),
                    asset: label,
                    tariff: rng.gen_range(1..4),
                };
                (actor, cmd)
            } else {
                (actor, cmd)
            }
        } else if roll < 30 {
            let l = listings.choose(&mut rng).expect("non-empty");
            let start = tick + rng.gen_range(2..40);
            let cmd = Command::SetAvailability {
                asset: l.label.clone(),
                window: Window::new(start, start + rng.gen_range(10..80)).into(),
            };
            (l.owner.clone(), cmd)
        } else if roll < 50 {
            let asset = rng.gen_range(0..listings.len());
            let tenant = pick(&mut rng);
            let start = tick + rng.gen_range(3..50);
            let window = Window::new(start, start + rng.gen_range(2..15));
            let label = format!("b{}", reservations.len());
            reservations.push(Reservation {
                label: label.clone(),
                asset,
                tenant: tenant.clone(),
                window,
            });
            let cmd = Command::Book {
                label,
                asset: listings[asset].label.clone(),
                window: window.into(),
                deposit: rng.gen_range(0..40),
            };
            (tenant, cmd)
        } else if roll < 56 && !reservations.is_empty() {
            let r = reservations.choose(&mut rng).expect("non-empty");
            (r.tenant.clone(), Command::Cancel { booking: r.label.clone() })
        } else if roll < 66 && !reservations.is_empty() {
            let ended: Vec<&Reservation> = reservations.iter().filter(|r| r.window.end <= tick).collect();
            let r = ended
                .choose(&mut rng)
                .copied()
                .unwrap_or_else(|| reservations.choose(&mut rng).expect("non-empty"));
            let cmd = Command::Settle {
                booking: r.label.clone(),
                damage: rng.gen_range(0..10),
            };
            (listings[r.asset].owner.clone(), cmd)
        } else if roll < 72 {
            let d = rng.gen_range(0..devices.len());
            let a = rng.gen_range(0..listings.len());
            let cmd = Command::RegisterDevice {
                device: format!("d{d}"),
                asset: listings[a].label.clone(),
                tariff: rng.gen_range(1..4),
            };
            (listings[a].owner.clone(), cmd)
        } else if roll < 82 && !device_asset.is_empty() {
            let (&d, &a) = device_asset
                .iter()
                .nth(rng.gen_range(0..device_asset.len()))
                .expect("in range");
            let cmd = Command::Meter {
                device: format!("d{d}"),
                units: rng.gen_range(0..6),
            };
            (listings[a].owner.clone(), cmd)
        } else if roll < 88 && !reservations.is_empty() && !device_asset.is_empty() {
            let current: Vec<&Reservation> =
                reservations
                .iter()
                .filter(|r| r.window.contains_tick(tick + 2) && device_asset.values().any(|a| *a == r.asset))
                .collect();
            let r = current
                .choose(&mut rng)
                .copied()
                .unwrap_or_else(|| reservations.choose(&mut rng).expect("non-empty"));
            let d = device_asset
                .iter()
                .find(|(_, a)| **a == r.asset)
                .map_or(0, |(d, _)| *d);
            let issuer = if rng.gen_bool(0.7) { r.tenant.clone() } else { pick(&mut rng) };
            let cmd = Command::Unlock {
                device: format!("d{d}"),
                booking: r.label.clone(),
            };
            (issuer, cmd)
        } else if roll < 90 {
            let l = listings.choose(&mut rng).expect("non-empty");
            (l.owner.clone(), Command::DelistAsset { asset: l.label.clone() })
        } else if roll < 93 {
            let a = rng.gen_range(0..listings.len());
            let to = pick(&mut rng);
            let cmd = Command::TransferAsset {
                asset: listings[a].label.clone(),
                to: to.clone(),
            };
            listings[a].owner = to;
            ("u1".to_string(), cmd)
        } else {
            let cmd = Command::Transfer {
                to: pick(&mut rng),
                amount: rng.gen_range(1..200),
            };
            (pick(&mut rng), cmd)
        };
        out.push(Action {
            tick,
            actor: Some(actor),
            command,
        });
    }
    out.truncate(actions);

    ScenarioScript {
        rng_seed: seed,
        network: Some(NetworkConfig {
            latency: LatencyConfig {
                min: 1,
                max: 3,
                overrides: Vec::new(),
            },
            ..NetworkConfig::default()
        }),
        network_config: None,
        validators: (0..4).map(|i| 9001 + i).collect(),
        admin_seed: None,
        actors,
        devices,
        params: ParamsSpec {
            attestor: Some("u0".into()),
            registrar: Some("u1".into()),
            cancellation_fee_bps: 500,
            gas: None,
            usage_gas_payer: Default::default(),
        },
        command_ttl: default_command_ttl(),
        drain_ticks: default_drain_ticks(),
        actions: out,
    }
}
