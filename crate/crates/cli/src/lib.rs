//! `rentledger`: wallet, scenario runner and node launcher.
//!
//! Ledger subcommands sign locally with a key from the data directory and
//! submit through a running node service (`rentledger node run`). `keygen`,
//! `convert` and `scenario run` work offline.
//!
//! Every failure prints `{"error":{"code":..,"message":..}}` to stderr. Exit
//! codes: 0 success, 1 operation failed, 2 bad invocation.

mod keystore;

use std::ffi::OsString;
use std::io::{IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rentledger_client::{Client, ClientError};
use rentledger_core::api::{AssetQuery, ErrorBody};
use rentledger_core::codec::canonical_json;
use rentledger_core::consensus::{is_yaml, NodeId};
use rentledger_core::fx::{convert_fiat, FxRateTable};
use rentledger_core::harness::{device_topic_key, run_scenario, LocalProfile, RunOptions};
use rentledger_core::iot::{device_id_for, device_topic, CommandKind, CommandMessage, UsageEvent};
use rentledger_core::keys::{digest_bytes, Address, Digest, Seed};
use rentledger_core::ledger::{ContractCall, Transaction};
use rentledger_core::market::{kyc_attestation_message, Location, OwnershipAttestation, Window};
use rentledger_core::whisper::{seal_envelope, TopicKey};
use rentledger_service::{serve_until, Hub, ServiceConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use keystore::{KeyFile, Keystore};

pub const DEFAULT_SERVER: &str = "http://127.0.0.1:7878";
pub const DEFAULT_LISTEN: &str = "127.0.0.1:7878";
pub const DEFAULT_DATA_DIR: &str = ".rentledger";
pub const DEFAULT_GAS_LIMIT: u64 = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: String,
    pub message: String,
    pub exit: i32,
}

impl CliError {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        CliError {
            code: code.into(),
            message: message.into(),
            exit: 1,
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            exit: 2,
            ..CliError::new("UsageError", message)
        }
    }

    pub fn io(path: &Path, e: impl ToString) -> Self {
        CliError::new("IoError", format!("{}: {}", path.display(), e.to_string()))
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        let message = match &e {
            ClientError::Api { message, .. } => message.clone(),
            other => other.to_string(),
        };
        CliError::new(e.code(), message)
    }
}

/// Optional settings file named by `--config`. Flags and environment
/// variables override it.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub server: Option<String>,
    pub key: Option<String>,
    pub gas_limit: Option<u64>,
    /// Genesis for `node run` on an empty data directory.
    pub node: Option<ServiceConfig>,
    /// Rate table for `convert`.
    pub rates: Option<FxRateTable>,
}

fn read_structured<T: DeserializeOwned>(path: &Path, code: &str) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let parsed = if is_yaml(path) {
        serde_yaml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::new(code, format!("{}: {e}", path.display())))
}

#[derive(Debug, Parser)]
#[command(name = "rentledger", version, about = "Rental ledger wallet, scenario runner and node")]
struct Cli {
    /// Local directory for keys, profiles and node state.
    #[arg(long, env = "RENTLEDGER_DATA", global = true)]
    data_dir: Option<PathBuf>,
    /// Settings file (JSON or YAML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    /// Node service base URL.
    #[arg(long, env = "RENTLEDGER_SERVER", global = true)]
    server: Option<String>,
    /// Signing key name in the data directory.
    #[arg(long, global = true)]
    key: Option<String>,
    #[arg(long, global = true)]
    gas_limit: Option<u64>,
    /// Entry node for submissions; the service's first node otherwise.
    #[arg(long, global = true)]
    node: Option<Address>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Create a signing key (random unless --seed is given).
    Keygen {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "default")]
        name: String,
        /// Replace an existing key of the same name.
        #[arg(long)]
        force: bool,
    },
    /// Register the signing key's owner. The profile stays local; only the
    /// digest of its documents goes on chain.
    Register {
        #[arg(long)]
        profile: PathBuf,
    },
    /// Vouch for a registered user's documents (attestor key).
    AttestKyc {
        #[arg(long)]
        user: Address,
    },
    ListAsset {
        /// Off-chain metadata document (JSON); only its digest is listed.
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        lat: f64,
        #[arg(long, allow_negative_numbers = true)]
        lon: f64,
        /// Price per tick.
        #[arg(long)]
        price: u64,
        #[arg(long)]
        sensitive: bool,
    },
    DelistAsset {
        #[arg(long)]
        asset: Digest,
    },
    SetAvailability {
        #[arg(long)]
        asset: Digest,
        /// `start:end`, end exclusive.
        #[arg(long)]
        window: Window,
    },
    Book {
        #[arg(long)]
        asset: Digest,
        #[arg(long)]
        window: Window,
        #[arg(long, default_value_t = 0)]
        deposit: u64,
    },
    Cancel {
        #[arg(long)]
        booking: Digest,
    },
    Settle {
        #[arg(long)]
        booking: Digest,
        #[arg(long, default_value_t = 0)]
        damage: u64,
    },
    /// Send tokens to another address.
    Transfer {
        #[arg(long)]
        to: Address,
        #[arg(long)]
        amount: u64,
    },
    /// Move an asset to a new owner (registrar key).
    TransferAsset {
        #[arg(long)]
        asset: Digest,
        #[arg(long)]
        to: Address,
    },
    /// Bind a device key to an asset and host its agent on the service.
    RegisterDevice {
        #[arg(long)]
        asset: Digest,
        /// Name of the device's key in the data directory.
        #[arg(long)]
        device_key: String,
        #[arg(long)]
        tariff: u64,
        /// Skip hosting the device agent.
        #[arg(long)]
        no_agent: bool,
    },
    TransferDevice {
        #[arg(long)]
        device: Digest,
        #[arg(long)]
        to: Address,
    },
    Unlock(DeviceCommand),
    Lock(DeviceCommand),
    /// Submit a usage reading signed by a device key.
    Meter {
        #[arg(long)]
        device_key: String,
        #[arg(long)]
        units: u64,
        /// Reading tick; the service's current tick otherwise.
        #[arg(long)]
        at: Option<u64>,
    },
    Bill {
        #[arg(long)]
        booking: Digest,
    },
    /// Two-hop fiat conversion through the token.
    Convert {
        #[arg(long)]
        amount: u128,
        #[arg(long)]
        from: String,
        #[arg(long)]
        to: String,
        /// Rate table file; the config's `rates` otherwise.
        #[arg(long)]
        rates: Option<PathBuf>,
    },
    Query {
        /// `lat_min,lon_min,lat_max,lon_max` in degrees.
        #[arg(long, allow_hyphen_values = true)]
        bbox: Option<String>,
        #[arg(long)]
        price_min: Option<u64>,
        #[arg(long)]
        price_max: Option<u64>,
        /// Only assets bookable for exactly `start:end`.
        #[arg(long)]
        window: Option<String>,
    },
    Node {
        #[command(subcommand)]
        command: NodeCmd,
    },
    Scenario {
        #[command(subcommand)]
        command: ScenarioCmd,
    },
    State {
        #[command(subcommand)]
        command: StateCmd,
    },
    /// Network clock, heads and pools.
    Status,
    /// Advance simulated time.
    Tick {
        #[arg(long, default_value_t = 1)]
        ticks: u64,
    },
    /// Balance and nonces; the signing key's account by default.
    Account {
        #[arg(long)]
        address: Option<Address>,
    },
    /// Lock/unlock decisions made by hosted devices.
    Decisions,
}

#[derive(Debug, Args)]
struct DeviceCommand {
    #[arg(long)]
    device: Digest,
    #[arg(long)]
    booking: Digest,
    /// Device topic key from the owner; derived when the device key is local.
    #[arg(long)]
    topic_key: Option<TopicKey>,
    /// Ticks the envelope stays deliverable.
    #[arg(long, default_value_t = 10)]
    ttl: u64,
}

#[derive(Debug, Subcommand)]
enum NodeCmd {
    /// Serve the node API until interrupted.
    Run {
        #[arg(long, default_value = DEFAULT_LISTEN)]
        listen: String,
        /// Advance one tick per this many milliseconds; manual ticks only
        /// when absent.
        #[arg(long)]
        tick_ms: Option<u64>,
    },
}

#[derive(Debug, Subcommand)]
enum ScenarioCmd {
    /// Replay a script and report invariants. Exit 1 when one fails.
    Run {
        script: PathBuf,
        /// Directory for persist/restore actions and the trace.
        #[arg(long)]
        work_dir: Option<PathBuf>,
        /// Write `trace.jsonl` into the work directory.
        #[arg(long)]
        trace: bool,
    },
}

#[derive(Debug, Subcommand)]
enum StateCmd {
    /// Persist the service's network under a snapshot name.
    Save {
        #[arg(long)]
        name: Option<String>,
    },
    /// Replace the service's network with a saved snapshot.
    Load {
        #[arg(long)]
        name: Option<String>,
    },
}

struct Ctx {
    data_dir: PathBuf,
    config: CliConfig,
    server: String,
    key: String,
    gas_limit: u64,
    node: Option<NodeId>,
}

impl Ctx {
    fn client(&self) -> Client {
        Client::new(self.server.clone())
    }

    fn keystore(&self) -> Keystore {
        Keystore::new(&self.data_dir)
    }

    fn signer(&self) -> Result<KeyFile, CliError> {
        self.keystore().load(&self.key)
    }

    /// Signs with the current key at its next nonce and submits.
    async fn submit(&self, call: ContractCall) -> Result<Value, CliError> {
        let key = self.signer()?;
        let client = self.client();
        let nonce = client.account(&key.address).await?.next_nonce;
        let tx = Transaction::signed(&key.keypair(), nonce, call, self.gas_limit);
        let sent = client.submit(tx, self.node).await?;
        Ok(json!({
            "digest": sent.digest,
            "node": sent.node,
            "sender": key.address,
            "nonce": nonce,
            "outcome": sent.outcome,
        }))
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("output types serialize")
}

/// Text form: one `key: value` line per top-level field, one line per array
/// element, strings unquoted.
fn render_text(v: &Value) -> String {
    let scalar = |v: &Value| match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    match v {
        Value::Object(map) => map.iter().map(|(k, v)| format!("{k}: {}\n", scalar(v))).collect(),
        Value::Array(items) => items.iter().map(|v| format!("{}\n", scalar(v))).collect(),
        Value::Null => String::new(),
        other => format!("{}\n", scalar(other)),
    }
}

async fn execute(cli: Cli, out: &mut dyn Write) -> Result<Value, CliError> {
    let config: CliConfig = match &cli.config {
        Some(path) => read_structured(path, "BadConfig")?,
        None => CliConfig::default(),
    };
    let ctx = Ctx {
        data_dir: cli.data_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR)),
        server: cli
            .server
            .clone()
            .or_else(|| config.server.clone())
            .unwrap_or_else(|| DEFAULT_SERVER.into()),
        key: cli
            .key
            .clone()
            .or_else(|| config.key.clone())
            .unwrap_or_else(|| "default".into()),
        gas_limit: cli.gas_limit.or(config.gas_limit).unwrap_or(DEFAULT_GAS_LIMIT),
        node: cli.node,
        config,
    };

    match cli.command {
        Cmd::Keygen { seed, name, force } => {
            let seed = match seed {
                Some(n) => Seed::from_u64(n),
                None => Seed(rand::random()),
            };
            let key = ctx.keystore().create(&name, seed, force)?;
            Ok(json!({"name": key.name, "address": key.address, "public_key": key.public_key}))
        }
        Cmd::Register { profile } => {
            let doc: LocalProfile = read_structured(&profile, "BadProfile")?;
            let digest = doc.kyc_doc_digest();
            let mut result = ctx.submit(ContractCall::RegisterUser { kyc_doc_digest: digest }).await?;
            ctx.keystore().save_profile(&ctx.key, &doc)?;
            result["kyc_doc_digest"] = to_value(&digest);
            Ok(result)
        }
        Cmd::AttestKyc { user } => {
            let record = ctx.client().user(&user).await?;
            let signature = ctx
                .signer()?
                .keypair()
                .sign(&kyc_attestation_message(&user, &record.kyc_doc_digest));
            ctx.submit(ContractCall::AttestKyc {
                user,
                attestor_signature: signature,
            })
            .await
        }
        Cmd::ListAsset {
            metadata,
            lat,
            lon,
            price,
            sensitive,
        } => {
            if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
                return Err(CliError::usage("latitude must be within ±90 and longitude within ±180"));
            }
            let doc: Value = read_structured(&metadata, "BadMetadata")?;
            let metadata_digest = digest_bytes(&canonical_json(&doc));
            ctx.submit(ContractCall::ListAsset {
                metadata_digest,
                location: Location::from_degrees(lat, lon),
                price_per_tick: price,
                sensitive,
            })
            .await
        }
        Cmd::DelistAsset { asset } => ctx.submit(ContractCall::DelistAsset { asset_id: asset }).await,
        Cmd::SetAvailability { asset, window } => {
            ctx.submit(ContractCall::SetAvailability { asset_id: asset, window }).await
        }
        Cmd::Book { asset, window, deposit } => {
            ctx.submit(ContractCall::BookAsset {
                asset_id: asset,
                window,
                deposit,
            })
            .await
        }
        Cmd::Cancel { booking } => ctx.submit(ContractCall::CancelBooking { booking_id: booking }).await,
        Cmd::Settle { booking, damage } => {
            ctx.submit(ContractCall::SettleBooking {
                booking_id: booking,
                damage_claim: damage,
            })
            .await
        }
        Cmd::Transfer { to, amount } => ctx.submit(ContractCall::PlainTransfer { to, amount }).await,
        Cmd::TransferAsset { asset, to } => {
            let signature = ctx.signer()?.keypair().sign(&OwnershipAttestation::message(&asset, &to));
            ctx.submit(ContractCall::TransferAssetOwnership {
                attestation: OwnershipAttestation {
                    asset_id: asset,
                    new_owner: to,
                    registrar_signature: signature,
                },
            })
            .await
        }
        Cmd::RegisterDevice {
            asset,
            device_key,
            tariff,
            no_agent,
        } => {
            let device = ctx.keystore().load(&device_key)?;
            let device_id = device_id_for(&device.public_key);
            let topic_key = device_topic_key(&device.seed);
            let mut result = ctx
                .submit(ContractCall::RegisterDevice {
                    asset_id: asset,
                    device_public_key: device.public_key.clone(),
                    tariff,
                })
                .await?;
            if !no_agent {
                ctx.client().attach_agent(device_id, topic_key, ctx.node).await?;
            }
            result["device_id"] = to_value(&device_id);
            result["topic_key"] = to_value(&topic_key);
            result["agent_hosted"] = json!(!no_agent);
            Ok(result)
        }
        Cmd::TransferDevice { device, to } => {
            ctx.submit(ContractCall::TransferDeviceOwnership {
                device_id: device,
                new_owner: to,
            })
            .await
        }
        Cmd::Unlock(args) => send_command(&ctx, CommandKind::Unlock, args).await,
        Cmd::Lock(args) => send_command(&ctx, CommandKind::Lock, args).await,
        Cmd::Meter { device_key, units, at } => {
            let device = ctx.keystore().load(&device_key)?;
            let at = match at {
                Some(t) => t,
                None => ctx.client().status().await?.now,
            };
            let event = UsageEvent::signed(&device.keypair(), units, at);
            ctx.submit(ContractCall::RecordUsage { event }).await
        }
        Cmd::Bill { booking } => Ok(to_value(&ctx.client().bill(&booking).await?)),
        Cmd::Convert { amount, from, to, rates } => {
            let table = match (rates, &ctx.config.rates) {
                (Some(path), _) => read_structured(&path, "BadTable")?,
                (None, Some(t)) => t.clone(),
                (None, None) => return Err(CliError::usage("no rate table: pass --rates or set `rates` in --config")),
            };
            let converted = convert_fiat(amount, &from, &to, &table).map_err(|e| CliError::new(e.code(), e.to_string()))?;
            Ok(json!({"amount": amount.to_string(), "from": from, "to": to, "converted": converted.to_string()}))
        }
        Cmd::Query {
            bbox,
            price_min,
            price_max,
            window,
        } => {
            let query = AssetQuery {
                bbox,
                price_min,
                price_max,
                window,
            };
            // Catch malformed filters before any network traffic.
            query.to_filter().map_err(|e| CliError::new("BadFilter", e.to_string()))?;
            Ok(to_value(&ctx.client().assets(&query).await?))
        }
        Cmd::Node {
            command: NodeCmd::Run { listen, tick_ms },
        } => run_node(&ctx, &listen, tick_ms, out).await,
        Cmd::Scenario {
            command: ScenarioCmd::Run { script, work_dir, trace },
        } => {
            let work_dir = work_dir.unwrap_or_else(|| {
                let stem = script.file_stem().and_then(|s| s.to_str()).unwrap_or("scenario");
                ctx.data_dir.join("scenarios").join(stem)
            });
            let opts = RunOptions {
                work_dir: Some(work_dir),
                write_trace: trace,
            };
            let run = run_scenario(&script, &opts).map_err(|e| CliError::new(e.code(), e.to_string()))?;
            let report = to_value(&run.report);
            if !run.report.all_passed() {
                let failed: Vec<&str> = run
                    .report
                    .invariants
                    .iter()
                    .filter(|i| !i.passed)
                    .map(|i| i.name.as_str())
                    .collect();
                let _ = writeln!(out, "{}", serde_json::to_string_pretty(&report).expect("report serializes"));
                return Err(CliError::new("InvariantFailed", format!("failed invariants: {}", failed.join(", "))));
            }
            Ok(report)
        }
        Cmd::State { command } => {
            let client = ctx.client();
            let saved = match command {
                StateCmd::Save { name } => client.save_state(name).await?,
                StateCmd::Load { name } => client.load_state(name).await?,
            };
            Ok(to_value(&saved))
        }
        Cmd::Status => Ok(to_value(&ctx.client().status().await?)),
        Cmd::Tick { ticks } => Ok(to_value(&ctx.client().tick(ticks).await?)),
        Cmd::Account { address } => {
            let address = match address {
                Some(a) => a,
                None => ctx.signer()?.address,
            };
            Ok(to_value(&ctx.client().account(&address).await?))
        }
        Cmd::Decisions => Ok(to_value(&ctx.client().decisions().await?)),
    }
}

/// Seals a signed command to the device's topic and posts it. The device
/// decides when the envelope reaches it.
async fn send_command(ctx: &Ctx, kind: CommandKind, args: DeviceCommand) -> Result<Value, CliError> {
    let topic_key = match args.topic_key {
        Some(k) => k,
        None => ctx
            .keystore()
            .all()
            .into_iter()
            .find(|k| device_id_for(&k.public_key) == args.device)
            .map(|k| device_topic_key(&k.seed))
            .ok_or_else(|| CliError::usage("device key is not local; pass --topic-key"))?,
    };
    let issuer = ctx.signer()?;
    let client = ctx.client();
    let status = client.status().await?;
    let cmd = CommandMessage::signed(&issuer.keypair(), kind, args.device, args.booking, status.now);
    let envelope = seal_envelope(
        device_topic(&args.device),
        &canonical_json(&cmd),
        args.ttl,
        &topic_key,
        status.whisper_difficulty,
        status.now,
    )
    .map_err(|e| CliError::new(e.code(), e.to_string()))?;
    let posted = client.post_envelope(envelope, ctx.node).await?;
    Ok(json!({
        "envelope": posted.digest,
        "command": kind,
        "device": args.device,
        "booking": args.booking,
        "issued_at": status.now,
        "expires_at": status.now + args.ttl,
    }))
}

async fn run_node(ctx: &Ctx, listen: &str, tick_ms: Option<u64>, out: &mut dyn Write) -> Result<Value, CliError> {
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .try_init();
    let genesis = ctx.config.node.clone().unwrap_or_default();
    let node_dir = ctx.data_dir.join("node");
    let hub = Hub::open(&node_dir, &genesis).map_err(|e| CliError::new(e.code(), e.to_string()))?;
    let listener = tokio::net::TcpListener::bind(listen)
        .await
        .map_err(|e| CliError::new("IoError", format!("cannot listen on {listen}: {e}")))?;
    let addr = listener
        .local_addr()
        .map_err(|e| CliError::new("IoError", e.to_string()))?;
    let _ = writeln!(out, "listening on http://{addr} (data in {})", node_dir.display());
    let _ = out.flush();
    serve_until(listener, Arc::new(Mutex::new(hub)), tick_ms.map(Duration::from_millis), interrupted())
        .await
        .map_err(|e| CliError::new("IoError", e.to_string()))?;
    Ok(Value::Null)
}

/// Resolves on Ctrl-C, or SIGTERM on unix.
async fn interrupted() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => tokio::select! {
                _ = ctrl_c => {}
                _ = term.recv() => {}
            },
            Err(_) => ctrl_c.await,
        }
    }
    #[cfg(not(unix))]
    ctrl_c.await;
}

/// Parses `args` (including the program name), runs the command, and writes
/// output to `out` and errors to `err`. Returns the process exit code.
pub async fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let first = e.to_string();
            let message = first.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return report(err, &CliError::usage(message));
        }
    };
    let json_mode = cli.json;
    match execute(cli, out).await {
        Ok(value) => {
            let text = if json_mode {
                format!("{}\n", serde_json::to_string_pretty(&value).expect("values serialize"))
            } else {
                render_text(&value)
            };
            let _ = out.write_all(text.as_bytes());
            0
        }
        Err(e) => report(err, &e),
    }
}

fn report(err: &mut dyn Write, e: &CliError) -> i32 {
    let body = ErrorBody::new(e.code.clone(), e.message.clone());
    let _ = writeln!(err, "{}", serde_json::to_string(&body).expect("error serializes"));
    e.exit
}
