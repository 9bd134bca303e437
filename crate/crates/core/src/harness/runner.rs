use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::codec::canonical_json;
use crate::consensus::{create_network, GenesisSpec, Network, NetworkConfig, NodeId, TraceEvent};
use crate::iot::{device_id_for, device_topic, CommandKind, CommandMessage, DeviceAgent, UsageEvent};
use crate::keys::{digest_parts, generate_keypair, Address, Digest, KeyPair, Seed};
use crate::ledger::{Allocation, ContractCall, LedgerParams, Outcome, Transaction};
use crate::market::{kyc_attestation_message, Location, OwnershipAttestation};
use crate::persist::{chain_path, persist_state, restore_state};
use crate::whisper::{seal_envelope, TopicKey};

use super::{
    check_invariants, Action, Command, CommandRecord, Rejection, ScenarioReport, ScenarioScript,
    ScriptError, TamperCheck,
};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Base for persist/restore/tamper directories and `trace.jsonl`.
    pub work_dir: Option<PathBuf>,
    pub write_trace: bool,
}

/// A finished run: the report plus the final network for further inspection.
#[derive(Debug)]
pub struct ScenarioRun {
    pub report: ScenarioReport,
    pub network: Network,
    pub trace: Vec<TraceEvent>,
}

pub fn run_scenario(path: &Path, opts: &RunOptions) -> Result<ScenarioRun, ScriptError> {
    let script = ScenarioScript::from_path(path)?;
    run_script(&script, opts)
}

/// Topic key a device and its authorized tenants share, derived from the
/// device's key seed.
pub fn device_topic_key(device_seed: &Seed) -> TopicKey {
    TopicKey(digest_parts(&[b"device-topic-key", &device_seed.0]).0)
}

struct Actor {
    keypair: KeyPair,
    node: NodeId,
}

struct Device {
    keypair: KeyPair,
    id: Digest,
    key: TopicKey,
    node: usize,
}

struct Runner<'a> {
    script: &'a ScenarioScript,
    opts: &'a RunOptions,
    net: Network,
    actors: BTreeMap<String, Actor>,
    devices: BTreeMap<String, Device>,
    agents: Vec<DeviceAgent>,
    assets: BTreeMap<String, Digest>,
    bookings: BTreeMap<String, Digest>,
    trace: Vec<TraceEvent>,
    rejections: Vec<Rejection>,
    failures: Vec<Rejection>,
    commands: Vec<CommandRecord>,
    tamper_checks: Vec<TamperCheck>,
    artifacts: Vec<PathBuf>,
    counts: BTreeMap<String, u64>,
}

fn network_config(script: &ScenarioScript) -> Result<NetworkConfig, ScriptError> {
    let mut cfg = match (&script.network, &script.network_config) {
        (Some(c), _) => c.clone(),
        (None, Some(path)) => {
            NetworkConfig::from_path(path).map_err(|e| ScriptError::Invalid(e.to_string()))?
        }
        (None, None) => NetworkConfig::default(),
    };
    cfg.rng_seed = script.rng_seed;
    if let Some(seed) = script.admin_seed {
        cfg.admin_key = Some(generate_keypair(Seed::from_u64(seed)).public_key);
    }
    Ok(cfg)
}

pub fn run_script(script: &ScenarioScript, opts: &RunOptions) -> Result<ScenarioRun, ScriptError> {
    script.validate()?;
    let started = Instant::now();
    let cfg = network_config(script)?;

    let key_of = |name: &Option<String>| {
        name.as_ref()
            .map(|n| generate_keypair(Seed::from_u64(script.actors[n].seed)).public_key)
    };
    let mut params = LedgerParams {
        attestor_key: key_of(&script.params.attestor),
        registrar_key: key_of(&script.params.registrar),
        cancellation_fee_bps: script.params.cancellation_fee_bps,
        usage_gas_payer: script.params.usage_gas_payer,
        ..LedgerParams::default()
    };
    if let Some(gas) = &script.params.gas {
        params.gas = gas.clone();
    }
    let allocations = script
        .actors
        .values()
        .filter(|a| a.balance > 0)
        .map(|a| Allocation {
            address: generate_keypair(Seed::from_u64(a.seed)).address(),
            amount: a.balance,
        })
        .collect();
    let validators: Vec<KeyPair> = script
        .validators
        .iter()
        .map(|s| generate_keypair(Seed::from_u64(*s)))
        .collect();
    let net = create_network(cfg, GenesisSpec { allocations, params }, validators)
        .map_err(|e| ScriptError::Invalid(e.to_string()))?;

    let node_ids = net.node_ids();
    let actors = script
        .actors
        .iter()
        .enumerate()
        .map(|(i, (name, spec))| {
            let idx = spec.node.unwrap_or(i % node_ids.len());
            let node = *node_ids
                .get(idx)
                .ok_or_else(|| ScriptError::Invalid(format!("actor {name:?}: no node {idx}")))?;
            let keypair = generate_keypair(Seed::from_u64(spec.seed));
            Ok((name.clone(), Actor { keypair, node }))
        })
        .collect::<Result<_, ScriptError>>()?;
    let devices = script
        .devices
        .iter()
        .map(|(name, spec)| {
            if spec.node >= node_ids.len() {
                return Err(ScriptError::Invalid(format!("device {name:?}: no node {}", spec.node)));
            }
            let keypair = generate_keypair(Seed::from_u64(spec.seed));
            let device = Device {
                id: device_id_for(&keypair.public_key),
                key: device_topic_key(&Seed::from_u64(spec.seed)),
                keypair,
                node: spec.node,
            };
            Ok((name.clone(), device))
        })
        .collect::<Result<_, ScriptError>>()?;

    let mut runner = Runner {
        script,
        opts,
        net,
        actors,
        devices,
        agents: Vec::new(),
        assets: BTreeMap::new(),
        bookings: BTreeMap::new(),
        trace: Vec::new(),
        rejections: Vec::new(),
        failures: Vec::new(),
        commands: Vec::new(),
        tamper_checks: Vec::new(),
        artifacts: Vec::new(),
        counts: BTreeMap::new(),
    };
    runner.attach_agents();
    for (i, action) in script.actions.iter().enumerate() {
        while runner.net.now() < action.tick {
            runner.step();
        }
        runner.bump("actions");
        runner.execute(i, action);
    }
    let mut drained = 0;
    while !runner.net.is_quiescent() && drained < script.drain_ticks {
        runner.step();
        drained += 1;
    }
    // Let outstanding commands reach their devices.
    for _ in 0..script.command_ttl {
        if runner.net.in_flight().next().is_none() {
            break;
        }
        runner.step();
    }
    runner.collect_trace();
    Ok(runner.finish(started))
}

impl Runner<'_> {
    fn bump(&mut self, key: &str) {
        *self.counts.entry(key.to_string()).or_default() += 1;
    }

    fn attach_agents(&mut self) {
        let ids = self.net.node_ids();
        self.agents = self
            .devices
            .values()
            .map(|d| DeviceAgent::attach(&mut self.net, ids[d.node], d.id, d.key).expect("node exists"))
            .collect();
    }

    fn collect_trace(&mut self) {
        let events = self.net.take_trace();
        for ev in &events {
            let name = serde_json::to_value(ev.kind).expect("trace kind serializes");
            *self
                .counts
                .entry(name.as_str().unwrap_or("unknown").to_string())
                .or_default() += 1;
        }
        self.trace.extend(events);
    }

    fn step(&mut self) {
        self.net.advance_tick();
        for agent in &mut self.agents {
            let outcomes = agent.poll(&mut self.net).expect("agent node exists");
            for o in outcomes {
                let (Some(cmd), Some(decision)) = (o.command, o.decision) else {
                    continue;
                };
                self.commands.push(CommandRecord {
                    decided_at: o.at,
                    device: cmd.device_id,
                    booking: cmd.booking_id,
                    issuer: cmd.issuer,
                    kind: cmd.kind,
                    decision,
                });
            }
        }
        let now = self.net.now();
        self.net.purge_expired(now);
        if self.net.trace().len() > 4096 {
            self.collect_trace();
        }
    }

    fn reject(&mut self, i: usize, action: &Action, code: &str, message: String) {
        self.bump("rejected");
        self.rejections.push(Rejection {
            tick: self.net.now(),
            action: i,
            actor: action.actor.clone(),
            command: action.command.name().to_string(),
            code: code.to_string(),
            message,
        });
    }

    fn fail(&mut self, i: usize, action: &Action, code: &str, message: String) {
        self.bump("failures");
        self.failures.push(Rejection {
            tick: self.net.now(),
            action: i,
            actor: action.actor.clone(),
            command: action.command.name().to_string(),
            code: code.to_string(),
            message,
        });
    }

    fn address(&self, name: &str) -> Option<Address> {
        self.actors.get(name).map(|a| a.keypair.address())
    }

    fn execute(&mut self, i: usize, action: &Action) {
        if let Err((code, message)) = self.try_execute(i, action) {
            self.reject(i, action, code, message);
        }
    }

    fn try_execute(&mut self, i: usize, action: &Action) -> Result<(), (&'static str, String)> {
        let label = |map: &BTreeMap<String, Digest>, l: &str| {
            map.get(l).copied().ok_or(("UnknownLabel", format!("unknown label {l:?}")))
        };
        let actor_addr = |name: &str| {
            self.address(name)
                .ok_or(("UnknownActor", format!("unknown actor {name:?}")))
        };
        let device = |name: &str| {
            self.devices
                .get(name)
                .ok_or(("UnknownLabel", format!("unknown device {name:?}")))
        };
        let window = |w: &super::WindowArg| w.resolve().map_err(|m| ("BadWindow", m));
        let actor_name = action.actor.clone();
        let me = actor_name.as_deref().unwrap_or_default();

        let payload = match &action.command {
            Command::Register => {
                let doc = self.script.actors[me].profile.clone().unwrap_or_default();
                ContractCall::RegisterUser {
                    kyc_doc_digest: doc.kyc_doc_digest(),
                }
            }
            Command::AttestKyc { user } => {
                let addr = actor_addr(user)?;
                let doc = self.script.actors[user.as_str()].profile.clone().unwrap_or_default();
                let sig = self.actors[me]
                    .keypair
                    .sign(&kyc_attestation_message(&addr, &doc.kyc_doc_digest()));
                ContractCall::AttestKyc {
                    user: addr,
                    attestor_signature: sig,
                }
            }
            Command::Transfer { to, amount } => ContractCall::PlainTransfer {
                to: actor_addr(to)?,
                amount: *amount,
            },
            Command::ListAsset {
                metadata,
                lat,
                lon,
                price,
                sensitive,
                ..
            } => ContractCall::ListAsset {
                metadata_digest: crate::keys::digest_bytes(&canonical_json(metadata)),
                location: Location::from_degrees(*lat, *lon),
                price_per_tick: *price,
                sensitive: *sensitive,
            },
            Command::DelistAsset { asset } => ContractCall::DelistAsset {
                asset_id: label(&self.assets, asset)?,
            },
            Command::SetAvailability { asset, window: w } => ContractCall::SetAvailability {
                asset_id: label(&self.assets, asset)?,
                window: window(w)?,
            },
            Command::Book {
                asset,
                window: w,
                deposit,
                ..
            } => ContractCall::BookAsset {
                asset_id: label(&self.assets, asset)?,
                window: window(w)?,
                deposit: *deposit,
            },
            Command::Cancel { booking } => ContractCall::CancelBooking {
                booking_id: label(&self.bookings, booking)?,
            },
            Command::Settle { booking, damage } => ContractCall::SettleBooking {
                booking_id: label(&self.bookings, booking)?,
                damage_claim: *damage,
            },
            Command::TransferAsset { asset, to } => {
                let asset_id = label(&self.assets, asset)?;
                let new_owner = actor_addr(to)?;
                let sig = self.actors[me]
                    .keypair
                    .sign(&OwnershipAttestation::message(&asset_id, &new_owner));
                ContractCall::TransferAssetOwnership {
                    attestation: OwnershipAttestation {
                        asset_id,
                        new_owner,
                        registrar_signature: sig,
                    },
                }
            }
            Command::RegisterDevice {
                device: d,
                asset,
                tariff,
            } => ContractCall::RegisterDevice {
                asset_id: label(&self.assets, asset)?,
                device_public_key: device(d)?.keypair.public_key.clone(),
                tariff: *tariff,
            },
            Command::TransferDevice { device: d, to } => ContractCall::TransferDeviceOwnership {
                device_id: device(d)?.id,
                new_owner: actor_addr(to)?,
            },
            Command::Meter { device: d, units } => ContractCall::RecordUsage {
                event: UsageEvent::signed(&device(d)?.keypair, *units, self.net.now()),
            },
            Command::Unlock { device: d, booking } | Command::Lock { device: d, booking } => {
                let kind = if matches!(action.command, Command::Unlock { .. }) {
                    CommandKind::Unlock
                } else {
                    CommandKind::Lock
                };
                let dev = device(d)?;
                let booking_id = label(&self.bookings, booking)?;
                let now = self.net.now();
                let actor = &self.actors[me];
                let cmd = CommandMessage::signed(&actor.keypair, kind, dev.id, booking_id, now);
                let env = seal_envelope(
                    device_topic(&dev.id),
                    &canonical_json(&cmd),
                    self.script.command_ttl,
                    &dev.key,
                    self.net.config().whisper_difficulty,
                    now,
                )
                .map_err(|e| (e.code(), e.to_string()))?;
                let node = actor.node;
                self.net.post_envelope(node, env).map_err(|e| (e.code(), e.to_string()))?;
                self.bump("commands_sent");
                return Ok(());
            }
            Command::Join { seed, credential } => {
                let candidate = generate_keypair(Seed::from_u64(*seed));
                let cred = credential.then(|| {
                    let admin = self.script.admin_seed.unwrap_or(u64::MAX);
                    generate_keypair(Seed::from_u64(admin)).sign(&candidate.address().0)
                });
                self.net
                    .join_node(candidate, cred.as_ref())
                    .map_err(|e| (e.code(), e.to_string()))?;
                self.bump("joined");
                return Ok(());
            }
            Command::Persist { dir } => {
                let dir = self.work_path(dir).map_err(|m| ("NoWorkDir", m))?;
                match persist_state(&self.net, &dir) {
                    Ok(()) => self.bump("persisted"),
                    Err(e) => self.fail(i, action, e.code(), e.to_string()),
                }
                self.note_artifacts(&dir);
                return Ok(());
            }
            Command::Restore { dir } => {
                let dir = self.work_path(dir).map_err(|m| ("NoWorkDir", m))?;
                self.collect_trace();
                match restore_state(&dir) {
                    Ok(net) => {
                        self.net = net;
                        self.attach_agents();
                        self.bump("restored");
                    }
                    Err(e) => self.fail(i, action, e.code(), e.to_string()),
                }
                return Ok(());
            }
            Command::Tamper {
                dir,
                node,
                height,
                bit,
            } => {
                let dir = self.work_path(dir).map_err(|m| ("NoWorkDir", m))?;
                self.tamper(i, action, &dir, *node, *height, *bit);
                return Ok(());
            }
        };

        let actor = &self.actors[me];
        let node = actor.node;
        let sender = actor.keypair.address();
        let nonce = self
            .net
            .next_nonce(node, &sender)
            .map_err(|e| (e.code(), e.to_string()))?
            .ok_or(("UnknownSender", format!("unknown sender {sender}")))?;
        let gas = self.net.node_state(node).expect("actor node").params.gas.cost(payload.kind());
        let tx = Transaction::signed(&actor.keypair, nonce, payload, gas);
        let outcome = self.net.dry_run(node, &tx).map_err(|e| (e.code(), e.to_string()))?;
        match (&action.command, outcome) {
            (Command::ListAsset { label, .. }, Outcome::AssetListed { asset_id }) => {
                self.assets.insert(label.clone(), asset_id);
            }
            (Command::Book { label, .. }, Outcome::Booked { booking }) => {
                self.bookings.insert(label.clone(), booking.booking_id);
            }
            _ => {}
        }
        self.net.submit_transaction(node, tx).expect("actor node exists");
        self.bump("submitted");
        Ok(())
    }

    fn work_path(&self, dir: &str) -> Result<PathBuf, String> {
        self.opts
            .work_dir
            .as_ref()
            .map(|w| w.join(dir))
            .ok_or_else(|| "persistence actions need a work directory".to_string())
    }

    fn note_artifacts(&mut self, dir: &Path) {
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            let Ok(entries) = std::fs::read_dir(&d) else {
                continue;
            };
            for e in entries.flatten() {
                let p = e.path();
                if p.is_dir() {
                    stack.push(p);
                } else if !self.artifacts.contains(&p) {
                    self.artifacts.push(p);
                }
            }
        }
        self.artifacts.sort();
    }

    fn tamper(&mut self, i: usize, action: &Action, dir: &Path, node: usize, height: u64, bit: u64) {
        let tick = self.net.now();
        let mut check = TamperCheck {
            tick,
            node,
            height,
            detected: false,
            error: None,
        };
        let result = (|| -> Result<(), String> {
            persist_state(&self.net, dir).map_err(|e| e.to_string())?;
            let id = *self.net.node_ids().get(node).ok_or("no such node")?;
            let path = chain_path(dir, &id);
            let mut bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
            let starts: Vec<usize> = std::iter::once(0)
                .chain(bytes.iter().enumerate().filter(|(_, b)| **b == b'\n').map(|(k, _)| k + 1))
                .collect();
            let h = height as usize;
            if h + 1 >= starts.len() {
                return Err(format!("node {node} has no block at height {height}"));
            }
            let line_len = (starts[h + 1] - 1 - starts[h]) as u64;
            let pos = bit % (line_len * 8);
            bytes[starts[h] + (pos / 8) as usize] ^= 1 << (pos % 8);
            std::fs::write(&path, bytes).map_err(|e| e.to_string())
        })();
        if let Err(e) = result {
            self.reject(i, action, "TamperSetup", e);
            return;
        }
        self.note_artifacts(dir);
        match restore_state(dir) {
            Ok(_) => check.error = None,
            Err(e) => {
                check.detected = true;
                check.error = Some(e.to_string());
                self.fail(i, action, e.code(), format!("verify_chain failed: {e}"));
            }
        }
        self.tamper_checks.push(check);
    }

    fn finish(mut self, started: Instant) -> ScenarioRun {
        if self.opts.write_trace {
            if let Some(dir) = &self.opts.work_dir {
                let path = dir.join("trace.jsonl");
                let mut out = Vec::new();
                for ev in &self.trace {
                    out.extend_from_slice(&canonical_json(ev));
                    out.push(b'\n');
                }
                if std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&path, out)).is_ok() {
                    self.artifacts.push(path);
                }
            }
        }
        let sentinels: Vec<String> = self
            .script
            .actors
            .values()
            .filter_map(|a| a.profile.as_ref())
            .flat_map(|p| p.sentinels().map(str::to_string).collect::<Vec<_>>())
            .collect();
        let mut invariants = check_invariants(&self.net, &self.commands, &self.trace, &sentinels, &self.artifacts);
        if !self.tamper_checks.is_empty() {
            let missed = self.tamper_checks.iter().filter(|c| !c.detected).count();
            invariants.push(super::InvariantResult {
                name: "tamper_detection".into(),
                passed: missed == 0,
                detail: (missed > 0).then(|| format!("{missed} tampered snapshots restored cleanly")),
            });
        }
        let (final_height, final_chain_digest) = self.net.canonical_head();
        let final_state_digest = self
            .net
            .nodes()
            .iter()
            .find(|n| n.head_digest() == final_chain_digest)
            .map(|n| n.state().digest())
            .unwrap_or(Digest::ZERO);
        let accepted = self.commands.iter().filter(|c| c.decision.is_accept()).count() as u64;
        self.counts.insert("commands_accepted".into(), accepted);
        self.counts
            .insert("commands_rejected".into(), self.commands.len() as u64 - accepted);
        let report = ScenarioReport {
            final_chain_digest,
            final_height,
            final_state_digest,
            final_tick: self.net.now(),
            invariants,
            event_counts: self.counts,
            rejections: self.rejections,
            commands: self.commands,
            tamper_checks: self.tamper_checks,
            failures: self.failures,
            wall_clock_ms: started.elapsed().as_millis() as u64,
        };
        ScenarioRun {
            report,
            network: self.net,
            trace: self.trace,
        }
    }
}
