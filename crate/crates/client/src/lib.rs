//! Typed async client for the rentledger node service.

use rentledger_core::api::{
    AccountResponse, AgentRequest, AssetQuery, EnvelopeRequest, EnvelopeResponse, ErrorBody, JoinRequest,
    JoinResponse, StateRequest, StateResponse, StatusResponse, SubmitRequest, SubmitResponse, TickRequest,
    TickResponse,
};
use rentledger_core::consensus::{NodeId, TraceEvent};
use rentledger_core::harness::CommandRecord;
use rentledger_core::iot::{BillStatement, DeviceRecord};
use rentledger_core::keys::{Address, Digest, Seed, Signature};
use rentledger_core::ledger::Transaction;
use rentledger_core::market::{AssetRecord, Booking, UserRecord};
use rentledger_core::whisper::{Envelope, TopicKey};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    /// The service answered with an error object.
    #[error("{code}: {message}")]
    Api { status: u16, code: String, message: String },
    #[error("cannot reach {url}: {reason}")]
    Transport { url: String, reason: String },
    #[error("unexpected response from {url}: {reason}")]
    Decode { url: String, reason: String },
}

impl ClientError {
    /// The service's error code, or a transport-level one.
    pub fn code(&self) -> &str {
        match self {
            ClientError::Api { code, .. } => code,
            ClientError::Transport { .. } => "Unreachable",
            ClientError::Decode { .. } => "BadResponse",
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` is the service root, e.g. `http://127.0.0.1:7878`.
    pub fn new(base: impl Into<String>) -> Self {
        Client {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn send<T: DeserializeOwned>(&self, req: reqwest::RequestBuilder, url: String) -> Result<T> {
        let resp = req.send().await.map_err(|e| ClientError::Transport {
            url: url.clone(),
            reason: e.to_string(),
        })?;
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(|e| ClientError::Transport {
            url: url.clone(),
            reason: e.to_string(),
        })?;
        if !status.is_success() {
            return Err(match serde_json::from_slice::<ErrorBody>(&bytes) {
                Ok(body) => ClientError::Api {
                    status: status.as_u16(),
                    code: body.error.code,
                    message: body.error.message,
                },
                Err(_) => ClientError::Api {
                    status: status.as_u16(),
                    code: format!("Http{}", status.as_u16()),
                    message: String::from_utf8_lossy(&bytes).into_owned(),
                },
            });
        }
        // Some endpoints answer with an empty body.
        let bytes: &[u8] = if bytes.is_empty() { b"null" } else { &bytes };
        serde_json::from_slice(bytes).map_err(|e| ClientError::Decode {
            url,
            reason: e.to_string(),
        })
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        let url = format!("{}{path}", self.base);
        self.send(self.http.get(&url), url).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let url = format!("{}{path}", self.base);
        self.send(self.http.post(&url).json(body), url).await
    }

    pub async fn health(&self) -> Result<Value> {
        self.get("/v1/health").await
    }

    pub async fn status(&self) -> Result<StatusResponse> {
        self.get("/v1/status").await
    }

    pub async fn account(&self, address: &Address) -> Result<AccountResponse> {
        self.get(&format!("/v1/accounts/{address}")).await
    }

    pub async fn user(&self, address: &Address) -> Result<UserRecord> {
        self.get(&format!("/v1/users/{address}")).await
    }

    pub async fn assets(&self, query: &AssetQuery) -> Result<Vec<AssetRecord>> {
        let url = format!("{}/v1/assets", self.base);
        self.send(self.http.get(&url).query(query), url).await
    }

    pub async fn asset(&self, id: &Digest) -> Result<AssetRecord> {
        self.get(&format!("/v1/assets/{id}")).await
    }

    pub async fn booking(&self, id: &Digest) -> Result<Booking> {
        self.get(&format!("/v1/bookings/{id}")).await
    }

    pub async fn bill(&self, booking: &Digest) -> Result<Vec<BillStatement>> {
        self.get(&format!("/v1/bookings/{booking}/bill")).await
    }

    pub async fn device(&self, id: &Digest) -> Result<DeviceRecord> {
        self.get(&format!("/v1/devices/{id}")).await
    }

    pub async fn submit(&self, tx: Transaction, node: Option<NodeId>) -> Result<SubmitResponse> {
        self.post("/v1/transactions", &SubmitRequest { tx, node }).await
    }

    /// `{"status": "pending" | "included", "height"?: n}`.
    pub async fn transaction(&self, digest: &Digest) -> Result<Value> {
        self.get(&format!("/v1/transactions/{digest}")).await
    }

    pub async fn tick(&self, ticks: u64) -> Result<TickResponse> {
        self.post("/v1/tick", &TickRequest { ticks }).await
    }

    pub async fn attach_agent(&self, device_id: Digest, topic_key: TopicKey, node: Option<NodeId>) -> Result<()> {
        let req = AgentRequest {
            device_id,
            topic_key,
            node,
        };
        self.post::<_, Option<Value>>("/v1/agents", &req).await.map(|_| ())
    }

    pub async fn decisions(&self) -> Result<Vec<CommandRecord>> {
        self.get("/v1/decisions").await
    }

    pub async fn post_envelope(&self, envelope: Envelope, node: Option<NodeId>) -> Result<EnvelopeResponse> {
        self.post("/v1/whisper", &EnvelopeRequest { envelope, node }).await
    }

    pub async fn join(&self, seed: Seed, credential: Option<Signature>) -> Result<JoinResponse> {
        self.post("/v1/nodes", &JoinRequest { seed, credential }).await
    }

    /// Drains the service's buffered trace.
    pub async fn take_trace(&self) -> Result<Vec<TraceEvent>> {
        self.post("/v1/trace", &()).await
    }

    pub async fn save_state(&self, name: Option<String>) -> Result<StateResponse> {
        self.post("/v1/state/save", &StateRequest { name }).await
    }

    pub async fn load_state(&self, name: Option<String>) -> Result<StateResponse> {
        self.post("/v1/state/load", &StateRequest { name }).await
    }
}
