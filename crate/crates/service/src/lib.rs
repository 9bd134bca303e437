//! HTTP/JSON front end for a simulated rentledger network.
//!
//! The service owns one [`Network`](rentledger_core::consensus::Network)
//! behind a mutex, so requests are applied one at a time. Simulated time
//! advances only through `POST /v1/tick` or the optional wall-clock ticker.
//! Transactions arrive already signed; private keys stay with clients.

mod config;
mod error;
mod hub;

use std::future::Future;
use std::net::SocketAddr;
use std::str::FromStr;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use rentledger_core::api::{
    AccountResponse, AgentRequest, AssetQuery, EnvelopeRequest, EnvelopeResponse, JoinRequest, JoinResponse,
    StateRequest, StateResponse, StatusResponse, SubmitRequest, SubmitResponse, TickRequest, TickResponse,
};
use rentledger_core::consensus::TraceEvent;
use rentledger_core::harness::CommandRecord;
use rentledger_core::iot::{compute_bill, BillStatement, DeviceRecord};
use rentledger_core::keys::{generate_keypair, Address, Digest};
use rentledger_core::market::{query_assets, AssetRecord, Booking, UserRecord};
use serde::Serialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;

pub use config::{Funding, ServiceConfig};
pub use error::ServiceError;
pub use hub::{Hub, DEFAULT_SNAPSHOT};

pub type SharedHub = Arc<Mutex<Hub>>;

/// Most ticks one request may advance.
pub const MAX_TICKS_PER_REQUEST: u64 = 100_000;

type ApiResult<T> = Result<Json<T>, ServiceError>;

fn lock(hub: &SharedHub) -> MutexGuard<'_, Hub> {
    // A panic mid-request leaves the network as the last completed call saw it.
    hub.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn parse<T: FromStr>(what: &str, text: &str) -> Result<T, ServiceError> {
    text.parse()
        .map_err(|_| ServiceError::BadRequest(format!("{what} {text:?} is not 0x-prefixed hex of the right length")))
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ServiceError> {
    payload
        .map(|Json(t)| t)
        .map_err(|e| ServiceError::BadRequest(e.body_text()))
}

pub fn router(hub: SharedHub) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/status", get(status))
        .route("/v1/accounts/{address}", get(account))
        .route("/v1/users/{address}", get(user))
        .route("/v1/assets", get(assets))
        .route("/v1/assets/{id}", get(asset))
        .route("/v1/bookings/{id}", get(booking))
        .route("/v1/bookings/{id}/bill", get(bill))
        .route("/v1/devices/{id}", get(device))
        .route("/v1/transactions", post(submit))
        .route("/v1/transactions/{digest}", get(transaction))
        .route("/v1/tick", post(tick))
        .route("/v1/agents", post(attach_agent))
        .route("/v1/decisions", get(decisions))
        .route("/v1/whisper", post(whisper))
        .route("/v1/nodes", post(join))
        .route("/v1/trace", post(take_trace))
        .route("/v1/state/save", post(save))
        .route("/v1/state/load", post(load))
        .fallback(|| async { ServiceError::NotFound("route".into()) })
        .with_state(hub)
}

/// Serves until the listener fails. With `tick_every`, simulated time also
/// advances one tick per period.
pub async fn serve(listener: TcpListener, hub: SharedHub, tick_every: Option<Duration>) -> std::io::Result<()> {
    serve_until(listener, hub, tick_every, std::future::pending()).await
}

/// Like [`serve`], but stops once `shutdown` resolves, finishing in-flight
/// requests and then writing the default snapshot.
pub async fn serve_until<F>(
    listener: TcpListener,
    hub: SharedHub,
    tick_every: Option<Duration>,
    shutdown: F,
) -> std::io::Result<()>
where
    F: Future<Output = ()> + Send + 'static,
{
    let ticker = tick_every.map(|period| {
        let ticker = hub.clone();
        tokio::spawn(async move {
            let mut interval = tokio::time::interval(period);
            interval.tick().await;
            loop {
                interval.tick().await;
                lock(&ticker).step(1);
            }
        })
    });
    let addr: Option<SocketAddr> = listener.local_addr().ok();
    tracing::info!(?addr, "serving");
    axum::serve(listener, router(hub.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    if let Some(t) = ticker {
        t.abort();
    }
    let path = lock(&hub)
        .save(None)
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    tracing::info!(path = %path.display(), "saved state");
    Ok(())
}

async fn health() -> Json<Value> {
    Json(json!({"status": "ok"}))
}

async fn status(State(hub): State<SharedHub>) -> Json<StatusResponse> {
    Json(lock(&hub).status())
}

async fn account(State(hub): State<SharedHub>, Path(address): Path<String>) -> ApiResult<AccountResponse> {
    let address: Address = parse("address", &address)?;
    let hub = lock(&hub);
    let acct = hub
        .view()
        .account(&address)
        .cloned()
        .ok_or_else(|| ServiceError::NotFound(format!("account {address}")))?;
    let entry = hub.entry_node(None)?;
    let next_nonce = hub.network().next_nonce(entry, &address)?.unwrap_or(acct.nonce);
    Ok(Json(AccountResponse {
        address,
        balance: acct.balance,
        locked: acct.locked,
        nonce: acct.nonce,
        next_nonce,
    }))
}

fn lookup<T: Clone + Serialize>(
    hub: &SharedHub,
    what: &str,
    id: &str,
    find: impl Fn(&rentledger_core::ledger::ChainState, &Digest) -> Option<T>,
) -> ApiResult<T> {
    let id: Digest = parse(what, id)?;
    let hub = lock(hub);
    find(hub.view(), &id)
        .map(Json)
        .ok_or_else(|| ServiceError::NotFound(format!("{what} {id}")))
}

async fn user(State(hub): State<SharedHub>, Path(address): Path<String>) -> ApiResult<UserRecord> {
    let address: Address = parse("address", &address)?;
    let hub = lock(&hub);
    hub.view()
        .users
        .get(&address)
        .cloned()
        .map(Json)
        .ok_or_else(|| ServiceError::NotFound(format!("user {address}")))
}

async fn assets(
    State(hub): State<SharedHub>,
    query: Result<Query<AssetQuery>, QueryRejection>,
) -> ApiResult<Vec<AssetRecord>> {
    let Query(query) = query.map_err(|e| ServiceError::BadRequest(e.body_text()))?;
    let filter = query.to_filter()?;
    let hub = lock(&hub);
    Ok(Json(query_assets(hub.view(), &filter)?))
}

async fn asset(State(hub): State<SharedHub>, Path(id): Path<String>) -> ApiResult<AssetRecord> {
    lookup(&hub, "asset", &id, |s, id| s.assets.get(id).cloned())
}

async fn booking(State(hub): State<SharedHub>, Path(id): Path<String>) -> ApiResult<Booking> {
    lookup(&hub, "booking", &id, |s, id| s.bookings.get(id).cloned())
}

async fn device(State(hub): State<SharedHub>, Path(id): Path<String>) -> ApiResult<DeviceRecord> {
    lookup(&hub, "device", &id, |s, id| s.devices.get(id).cloned())
}

async fn bill(State(hub): State<SharedHub>, Path(id): Path<String>) -> ApiResult<Vec<BillStatement>> {
    let id: Digest = parse("booking", &id)?;
    let hub = lock(&hub);
    Ok(Json(compute_bill(hub.view(), &id)?))
}

/// Dry-runs against the entry node's projected state, then pools and gossips.
async fn submit(
    State(hub): State<SharedHub>,
    payload: Result<Json<SubmitRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<SubmitResponse>), ServiceError> {
    let req = body(payload)?;
    let mut hub = lock(&hub);
    let node = hub.entry_node(req.node)?;
    let outcome = hub.network().dry_run(node, &req.tx)?;
    let digest = hub.network_mut().submit_transaction(node, req.tx)?;
    Ok((StatusCode::ACCEPTED, Json(SubmitResponse { digest, node, outcome })))
}

async fn transaction(State(hub): State<SharedHub>, Path(digest): Path<String>) -> ApiResult<Value> {
    let digest: Digest = parse("transaction", &digest)?;
    let hub = lock(&hub);
    let net = hub.network();
    let (_, head) = net.canonical_head();
    let canonical = net.nodes().iter().find(|n| n.head_digest() == head).unwrap_or(&net.nodes()[0]);
    if let Some(block) = canonical
        .chain()
        .iter()
        .find(|b| b.transactions.iter().any(|t| t.digest() == digest))
    {
        return Ok(Json(json!({"digest": digest, "status": "included", "height": block.height})));
    }
    if net.nodes().iter().any(|n| n.has_pending(&digest)) {
        return Ok(Json(json!({"digest": digest, "status": "pending"})));
    }
    Err(ServiceError::NotFound(format!("transaction {digest}")))
}

async fn tick(
    State(hub): State<SharedHub>,
    payload: Result<Json<TickRequest>, JsonRejection>,
) -> ApiResult<TickResponse> {
    let req = body(payload)?;
    if req.ticks > MAX_TICKS_PER_REQUEST {
        return Err(ServiceError::BadRequest(format!("at most {MAX_TICKS_PER_REQUEST} ticks per request")));
    }
    let mut hub = lock(&hub);
    let decisions = hub.step(req.ticks);
    let status = hub.status();
    Ok(Json(TickResponse {
        now: status.now,
        height: status.height,
        decisions,
    }))
}

async fn attach_agent(
    State(hub): State<SharedHub>,
    payload: Result<Json<AgentRequest>, JsonRejection>,
) -> Result<StatusCode, ServiceError> {
    let req = body(payload)?;
    lock(&hub).attach_agent(req)?;
    Ok(StatusCode::CREATED)
}

async fn decisions(State(hub): State<SharedHub>) -> Json<Vec<CommandRecord>> {
    Json(lock(&hub).decisions().to_vec())
}

async fn whisper(
    State(hub): State<SharedHub>,
    payload: Result<Json<EnvelopeRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<EnvelopeResponse>), ServiceError> {
    let req = body(payload)?;
    let mut hub = lock(&hub);
    let node = hub.entry_node(req.node)?;
    let digest = hub.network_mut().post_envelope(node, req.envelope)?;
    Ok((StatusCode::ACCEPTED, Json(EnvelopeResponse { digest })))
}

async fn join(
    State(hub): State<SharedHub>,
    payload: Result<Json<JoinRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<JoinResponse>), ServiceError> {
    let req = body(payload)?;
    let keypair = generate_keypair(req.seed);
    let node = lock(&hub)
        .network_mut()
        .join_node(keypair, req.credential.as_ref())?;
    Ok((StatusCode::CREATED, Json(JoinResponse { node })))
}

async fn take_trace(State(hub): State<SharedHub>) -> Json<Vec<TraceEvent>> {
    Json(lock(&hub).take_trace())
}

fn state_response(hub: &Hub, path: std::path::PathBuf) -> StateResponse {
    let (height, head) = hub.network().canonical_head();
    StateResponse {
        path: path.display().to_string(),
        height,
        head,
    }
}

async fn save(
    State(hub): State<SharedHub>,
    payload: Result<Json<StateRequest>, JsonRejection>,
) -> ApiResult<StateResponse> {
    let req = body(payload)?;
    let hub = lock(&hub);
    let path = hub.save(req.name.as_deref())?;
    Ok(Json(state_response(&hub, path)))
}

async fn load(
    State(hub): State<SharedHub>,
    payload: Result<Json<StateRequest>, JsonRejection>,
) -> ApiResult<StateResponse> {
    let req = body(payload)?;
    let mut hub = lock(&hub);
    let path = hub.load(req.name.as_deref())?;
    Ok(Json(state_response(&hub, path)))
}
