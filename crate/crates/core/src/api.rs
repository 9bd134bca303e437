//! JSON bodies exchanged between the node service and its clients.

use serde::{Deserialize, Serialize};

use crate::consensus::NodeId;
use crate::harness::CommandRecord;
use crate::keys::{Address, Digest, Seed, Signature};
use crate::ledger::{Outcome, Transaction};
use crate::market::{AssetFilter, BoundingBox, QueryError, Window};
use crate::whisper::{Envelope, TopicKey};

/// Error payload of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

impl ErrorBody {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        ErrorBody {
            error: ErrorDetail {
                code: code.into(),
                message: message.into(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeStatus {
    pub id: NodeId,
    pub height: u64,
    pub head: Digest,
    pub pending: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusResponse {
    pub now: u64,
    pub genesis: Digest,
    pub height: u64,
    pub head: Digest,
    pub heads_agree: bool,
    pub whisper_difficulty: u32,
    pub nodes: Vec<NodeStatus>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountResponse {
    pub address: Address,
    pub balance: u64,
    pub locked: u64,
    pub nonce: u64,
    /// Nonce for the next submission, counting pooled transactions.
    pub next_nonce: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub tx: Transaction,
    /// Entry node; the first node when absent.
    #[serde(default)]
    pub node: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub digest: Digest,
    pub node: NodeId,
    /// Result of applying the transaction to the node's projected state.
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickRequest {
    pub ticks: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickResponse {
    pub now: u64,
    pub height: u64,
    /// Device decisions made during these ticks.
    pub decisions: Vec<CommandRecord>,
}

/// Hosts a device agent that listens on the device's topic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRequest {
    pub device_id: Digest,
    pub topic_key: TopicKey,
    #[serde(default)]
    pub node: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvelopeRequest {
    pub envelope: Envelope,
    #[serde(default)]
    pub node: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvelopeResponse {
    pub digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinRequest {
    pub seed: Seed,
    #[serde(default)]
    pub credential: Option<Signature>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinResponse {
    pub node: NodeId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateRequest {
    /// Snapshot name under the service's data directory.
    #[serde(default)]
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateResponse {
    pub path: String,
    pub height: u64,
    pub head: Digest,
}

/// Query-string form of an asset filter, as the CLI flags spell it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetQuery {
    /// `lat_min,lon_min,lat_max,lon_max` in degrees.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price_min: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price_max: Option<u64>,
    /// `start:end`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<String>,
}

impl AssetQuery {
    pub fn to_filter(&self) -> Result<AssetFilter, QueryError> {
        let bbox = match &self.bbox {
            None => None,
            Some(text) => {
                let parts: Vec<f64> = text
                    .split(',')
                    .map(|p| p.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| QueryError::BadFilter(format!("bbox {text:?} is not four numbers")))?;
                let [lat_min, lon_min, lat_max, lon_max] = parts[..] else {
                    return Err(QueryError::BadFilter(format!("bbox {text:?} is not four numbers")));
                };
                if parts.iter().any(|p| !p.is_finite()) {
                    return Err(QueryError::BadFilter(format!("bbox {text:?} is not finite")));
                }
                Some(BoundingBox::from_degrees(lat_min, lat_max, lon_min, lon_max))
            }
        };
        let window = match &self.window {
            None => None,
            Some(text) => Some(
                text.parse::<Window>()
                    .map_err(|e| QueryError::BadFilter(format!("window {text:?}: {e}")))?,
            ),
        };
        let filter = AssetFilter {
            bbox,
            price_min: self.price_min,
            price_max: self.price_max,
            window,
        };
        filter.validate()?;
        Ok(filter)
    }
}
