use std::path::{Path, PathBuf};

use rentledger_core::api::{AgentRequest, StatusResponse, NodeStatus};
use rentledger_core::codec::canonical_json;
use rentledger_core::consensus::{Network, NodeId, TraceEvent};
use rentledger_core::harness::CommandRecord;
use rentledger_core::iot::DeviceAgent;
use rentledger_core::ledger::ChainState;
use rentledger_core::persist::{persist_state, restore_state};

use crate::{ServiceConfig, ServiceError};

const AGENTS_FILE: &str = "agents.json";
const SNAPSHOTS: &str = "snapshots";
pub const DEFAULT_SNAPSHOT: &str = "state";
/// Trace events kept before the oldest are discarded.
const TRACE_CAP: usize = 65_536;

/// The one network a service owns, plus the device agents it hosts.
/// Single writer: every mutation goes through `&mut self`.
pub struct Hub {
    net: Network,
    agents: Vec<(AgentRequest, DeviceAgent)>,
    decisions: Vec<CommandRecord>,
    trace: Vec<TraceEvent>,
    data_dir: PathBuf,
}

impl Hub {
    /// Resumes the default snapshot in `data_dir` when there is one,
    /// otherwise builds a fresh network from `config`.
    pub fn open(data_dir: &Path, config: &ServiceConfig) -> Result<Self, ServiceError> {
        std::fs::create_dir_all(data_dir).map_err(|e| ServiceError::io(data_dir, e))?;
        let snapshot = snapshot_dir(data_dir, DEFAULT_SNAPSHOT)?;
        let net = if snapshot.exists() {
            restore_state(&snapshot)?
        } else {
            config.build()?
        };
        let mut hub = Hub {
            net,
            agents: Vec::new(),
            decisions: Vec::new(),
            trace: Vec::new(),
            data_dir: data_dir.to_path_buf(),
        };
        let agents = data_dir.join(AGENTS_FILE);
        if agents.exists() {
            let bytes = std::fs::read(&agents).map_err(|e| ServiceError::io(&agents, e))?;
            let requests: Vec<AgentRequest> = serde_json::from_slice(&bytes)
                .map_err(|e| ServiceError::BadConfig(format!("{}: {e}", agents.display())))?;
            hub.attach_all(requests)?;
        }
        Ok(hub)
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    /// Node `id`, or the first node.
    pub fn entry_node(&self, id: Option<NodeId>) -> Result<NodeId, ServiceError> {
        match id {
            Some(id) => self.net.node(id).map(|n| n.id).map_err(ServiceError::from),
            None => Ok(self.net.nodes()[0].id),
        }
    }

    /// State of a node holding the canonical head.
    pub fn view(&self) -> &ChainState {
        let (_, head) = self.net.canonical_head();
        self.net
            .nodes()
            .iter()
            .find(|n| n.head_digest() == head)
            .unwrap_or(&self.net.nodes()[0])
            .state()
    }

    pub fn status(&self) -> StatusResponse {
        let (height, head) = self.net.canonical_head();
        StatusResponse {
            now: self.net.now(),
            genesis: self.net.genesis_digest(),
            height,
            head,
            heads_agree: self.net.heads_agree(),
            whisper_difficulty: self.net.config().whisper_difficulty,
            nodes: self
                .net
                .nodes()
                .iter()
                .map(|n| NodeStatus {
                    id: n.id,
                    height: n.height(),
                    head: n.head_digest(),
                    pending: n.pending_len(),
                })
                .collect(),
        }
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    /// Advances the clock, lets hosted devices act on what reached them, and
    /// returns their decisions.
    pub fn step(&mut self, ticks: u64) -> Vec<CommandRecord> {
        let mut out = Vec::new();
        for _ in 0..ticks {
            self.net.advance_tick();
            for (_, agent) in &mut self.agents {
                let Ok(outcomes) = agent.poll(&mut self.net) else {
                    continue;
                };
                for o in outcomes {
                    if let (Some(cmd), Some(decision)) = (o.command, o.decision) {
                        out.push(CommandRecord {
                            decided_at: o.at,
                            device: cmd.device_id,
                            booking: cmd.booking_id,
                            issuer: cmd.issuer,
                            kind: cmd.kind,
                            decision,
                        });
                    }
                }
            }
            let now = self.net.now();
            self.net.purge_expired(now);
            self.trace.extend(self.net.take_trace());
            if self.trace.len() > TRACE_CAP {
                let excess = self.trace.len() - TRACE_CAP;
                self.trace.drain(..excess);
            }
        }
        self.decisions.extend(out.iter().cloned());
        out
    }

    pub fn decisions(&self) -> &[CommandRecord] {
        &self.decisions
    }

    /// Hands over buffered trace events, oldest first.
    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        self.trace.extend(self.net.take_trace());
        std::mem::take(&mut self.trace)
    }

    pub fn attach_agent(&mut self, request: AgentRequest) -> Result<(), ServiceError> {
        if self.agents.iter().any(|(r, _)| r.device_id == request.device_id) {
            return Err(ServiceError::Conflict(format!("device {} already hosted", request.device_id)));
        }
        self.attach(request)?;
        self.save_agents()
    }

    fn attach(&mut self, request: AgentRequest) -> Result<(), ServiceError> {
        let node = self.entry_node(request.node)?;
        let agent = DeviceAgent::attach(&mut self.net, node, request.device_id, request.topic_key)?;
        self.agents.push((request, agent));
        Ok(())
    }

    fn attach_all(&mut self, requests: Vec<AgentRequest>) -> Result<(), ServiceError> {
        self.agents.clear();
        for r in requests {
            self.attach(r)?;
        }
        Ok(())
    }

    fn save_agents(&self) -> Result<(), ServiceError> {
        let requests: Vec<&AgentRequest> = self.agents.iter().map(|(r, _)| r).collect();
        let path = self.data_dir.join(AGENTS_FILE);
        std::fs::write(&path, canonical_json(&requests)).map_err(|e| ServiceError::io(&path, e))
    }

    pub fn save(&self, name: Option<&str>) -> Result<PathBuf, ServiceError> {
        let dir = snapshot_dir(&self.data_dir, name.unwrap_or(DEFAULT_SNAPSHOT))?;
        persist_state(&self.net, &dir)?;
        Ok(dir)
    }

    /// Swaps in a persisted network; hosted agents re-subscribe on it.
    pub fn load(&mut self, name: Option<&str>) -> Result<PathBuf, ServiceError> {
        let dir = snapshot_dir(&self.data_dir, name.unwrap_or(DEFAULT_SNAPSHOT))?;
        let net = restore_state(&dir)?;
        let old = std::mem::replace(&mut self.net, net);
        let requests: Vec<AgentRequest> = self.agents.iter().map(|(r, _)| r.clone()).collect();
        if let Err(e) = self.attach_all(requests.clone()) {
            self.net = old;
            self.attach_all(requests)?;
            return Err(e);
        }
        self.trace.clear();
        Ok(dir)
    }
}

/// Snapshot names are single path components under `<data>/snapshots`.
fn snapshot_dir(data_dir: &Path, name: &str) -> Result<PathBuf, ServiceError> {
    let ok = !name.is_empty()
        && name != "."
        && name != ".."
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if !ok {
        return Err(ServiceError::BadRequest(format!("snapshot name {name:?} must be a plain file name")));
    }
    Ok(data_dir.join(SNAPSHOTS).join(name))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_names_stay_inside_the_data_dir() {
        let base = Path::new("/data");
        assert_eq!(snapshot_dir(base, "nightly-1").unwrap(), base.join("snapshots/nightly-1"));
        for bad in ["", ".", "..", "../x", "a/b", "/etc"] {
            assert!(snapshot_dir(base, bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn reopen_resumes_the_saved_network() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ServiceConfig::default();
        let mut hub = Hub::open(dir.path(), &cfg).unwrap();
        hub.step(7);
        hub.save(None).unwrap();
        let again = Hub::open(dir.path(), &cfg).unwrap();
        assert_eq!(again.network().now(), 7);
        assert_eq!(again.status().genesis, hub.status().genesis);
    }
}
