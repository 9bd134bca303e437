use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::canonical_json;
use crate::keys::{generate_keypair, verify_signature, Digest, KeyPair, Seed, Signature};
use crate::ledger::{
    apply_transaction, validate_block, verify_chain, Allocation, Block, ChainRules, ChainState,
    Genesis, LedgerParams, Outcome, Transaction, TxError, ValidatorSet,
};
use crate::whisper::{Envelope, Topic, TopicKey, WhisperError, WhisperPool};

use super::{prefers_candidate, Mode, NetworkConfig, NetworkError, NodeId, NodeRef, TraceEvent, TraceKind};

/// Initial balances and chain parameters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenesisSpec {
    pub allocations: Vec<Allocation>,
    pub params: LedgerParams,
}

/// Pool sequence number and the error code it was dropped for.
type Dropped = (u64, String);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Tx { tx: Box<Transaction> },
    Block { block: Box<Block> },
    Envelope { envelope: Envelope },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InFlight {
    pub deliver_at: u64,
    pub seq: u64,
    pub from: NodeId,
    pub to: NodeId,
    pub message: Message,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingTx {
    pub seq: u64,
    pub arrived_at: u64,
    pub tx: Transaction,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    pub keypair: KeyPair,
    pub validator: bool,
    chain: Vec<Block>,
    hashes: Vec<Digest>,
    state: ChainState,
    pending: BTreeMap<u64, PendingTx>,
    pending_digests: BTreeSet<Digest>,
    whisper: WhisperPool,
}

impl Node {
    fn new(keypair: KeyPair, validator: bool, chain: Vec<Block>, state: ChainState) -> Node {
        let hashes = chain.iter().map(Block::header_digest).collect();
        Node {
            id: keypair.address(),
            keypair,
            validator,
            chain,
            hashes,
            state,
            pending: BTreeMap::new(),
            pending_digests: BTreeSet::new(),
            whisper: WhisperPool::default(),
        }
    }

    pub fn chain(&self) -> &[Block] {
        &self.chain
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn height(&self) -> u64 {
        self.state.height
    }

    pub fn head_digest(&self) -> Digest {
        self.state.head_digest
    }

    pub fn pending(&self) -> impl Iterator<Item = &Transaction> {
        self.pending.values().map(|p| &p.tx)
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn has_pending(&self, digest: &Digest) -> bool {
        self.pending_digests.contains(digest)
    }

    pub fn whisper(&self) -> &WhisperPool {
        &self.whisper
    }

    fn add_pending(&mut self, seq: u64, arrived_at: u64, tx: Transaction) -> bool {
        let digest = tx.digest();
        let stale = self
            .state
            .account(&tx.sender)
            .is_some_and(|a| a.nonce > tx.nonce);
        if stale || !self.pending_digests.insert(digest) {
            return false;
        }
        self.pending.insert(
            seq,
            PendingTx {
                seq,
                arrived_at,
                tx,
            },
        );
        true
    }

    fn remove_pending(&mut self, seq: u64) -> Option<PendingTx> {
        let p = self.pending.remove(&seq)?;
        self.pending_digests.remove(&p.tx.digest());
        Some(p)
    }

    /// Drops pooled transactions that are now included or superseded.
    fn prune_pending(&mut self) {
        let state = &self.state;
        let stale: Vec<u64> = self
            .pending
            .values()
            .filter(|p| state.account(&p.tx.sender).is_some_and(|a| a.nonce > p.tx.nonce))
            .map(|p| p.seq)
            .collect();
        for seq in stale {
            self.remove_pending(seq);
        }
    }

    /// State as it would look after this node's pool is applied at `now`.
    pub fn projected_state(&self, now: u64) -> ChainState {
        let mut scratch = self.state.clone();
        scratch.begin_block(now);
        let mut used = BTreeSet::new();
        loop {
            let mut progress = false;
            for p in self.pending.values() {
                if used.contains(&p.seq) {
                    continue;
                }
                if apply_transaction(&mut scratch, &p.tx, &self.id).is_ok() {
                    used.insert(p.seq);
                    progress = true;
                }
            }
            if !progress {
                break;
            }
        }
        scratch
    }
}

/// Persisted form of a network, minus block logs and whisper pools.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSnapshot {
    pub config: NetworkConfig,
    pub genesis: Block,
    pub validators: ValidatorSet,
    pub now: u64,
    pub seq: u64,
    pub trace_seq: u64,
    pub nodes: Vec<NodeSnapshot>,
    pub in_flight: Vec<InFlight>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSnapshot {
    pub id: NodeId,
    pub seed: Seed,
    pub validator: bool,
    pub height: u64,
    pub head: Digest,
    pub pending: Vec<PendingTx>,
}

#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    genesis: Block,
    genesis_digest: Digest,
    validators: ValidatorSet,
    nodes: Vec<Node>,
    index: BTreeMap<NodeId, usize>,
    now: u64,
    seq: u64,
    trace_seq: u64,
    queue: BTreeMap<(u64, u64), InFlight>,
    trace: Vec<TraceEvent>,
}

/// Builds a network whose nodes all start from the same genesis block.
pub fn create_network(
    config: NetworkConfig,
    genesis: GenesisSpec,
    validators: Vec<KeyPair>,
) -> Result<Network, NetworkError> {
    config.validate()?;
    if validators.is_empty() {
        return Err(NetworkError::EmptyValidatorSet);
    }
    let mut ids: Vec<NodeId> = validators.iter().map(KeyPair::address).collect();
    ids.sort();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(NetworkError::BadConfig("duplicate validator key".into()));
    }
    let block = Block::genesis(Genesis {
        allocations: genesis.allocations,
        validators: ids,
        params: genesis.params,
    });
    let state = ChainState::from_genesis(&block)
        .ok_or_else(|| NetworkError::BadConfig("genesis allocations overflow".into()))?;
    let schedule = ValidatorSet::from_genesis(block.genesis.as_ref().expect("just built"));
    let mut net = Network {
        genesis_digest: block.header_digest(),
        genesis: block.clone(),
        config,
        validators: schedule,
        nodes: Vec::new(),
        index: BTreeMap::new(),
        now: 0,
        seq: 0,
        trace_seq: 0,
        queue: BTreeMap::new(),
        trace: Vec::new(),
    };
    for kp in validators {
        net.push_node(Node::new(kp, true, vec![block.clone()], state.clone()));
    }
    Ok(net)
}

impl Network {
    fn push_node(&mut self, node: Node) {
        self.index.insert(node.id, self.nodes.len());
        self.nodes.push(node);
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn genesis(&self) -> &Block {
        &self.genesis
    }

    pub fn genesis_digest(&self) -> Digest {
        self.genesis_digest
    }

    pub fn validators(&self) -> &ValidatorSet {
        &self.validators
    }

    pub fn chain_rules(&self) -> ChainRules {
        ChainRules {
            validators: Some(self.validators.clone()),
            genesis_anchor: Some(self.genesis_digest),
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.iter().map(|n| n.id).collect()
    }

    pub fn node(&self, id: NodeId) -> Result<&Node, NetworkError> {
        self.index
            .get(&id)
            .map(|i| &self.nodes[*i])
            .ok_or(NetworkError::UnknownNode(id))
    }

    pub fn node_state(&self, id: NodeId) -> Result<&ChainState, NetworkError> {
        self.node(id).map(Node::state)
    }

    fn idx(&self, id: NodeId) -> Result<usize, NetworkError> {
        self.index.get(&id).copied().ok_or(NetworkError::UnknownNode(id))
    }

    pub fn resolve(&self, node: NodeRef) -> Option<NodeId> {
        match node {
            NodeRef::Index(i) => self.nodes.get(i).map(|n| n.id),
            NodeRef::Address(a) => self.index.contains_key(&a).then_some(a),
        }
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        std::mem::take(&mut self.trace)
    }

    pub fn in_flight(&self) -> impl Iterator<Item = &InFlight> {
        self.queue.values()
    }

    /// No messages in flight and every transaction pool empty.
    pub fn is_quiescent(&self) -> bool {
        self.queue.is_empty() && self.nodes.iter().all(|n| n.pending.is_empty())
    }

    /// Best head over all nodes under the fork-choice rule.
    pub fn canonical_head(&self) -> (u64, Digest) {
        let mut best = (self.nodes[0].height(), self.nodes[0].head_digest());
        for n in &self.nodes[1..] {
            let head = (n.height(), n.head_digest());
            if prefers_candidate(best, head) {
                best = head;
            }
        }
        best
    }

    pub fn heads_agree(&self) -> bool {
        let first = self.nodes[0].head_digest();
        self.nodes.iter().all(|n| n.head_digest() == first)
    }

    pub fn latency(&self, a: NodeId, b: NodeId) -> u64 {
        if a == b {
            return 0;
        }
        let ai = self.index.get(&a).copied();
        let bi = self.index.get(&b).copied();
        let matches = |r: &NodeRef, id: NodeId, i: Option<usize>| match r {
            NodeRef::Address(x) => *x == id,
            NodeRef::Index(x) => Some(*x) == i,
        };
        for o in &self.config.latency.overrides {
            if (matches(&o.a, a, ai) && matches(&o.b, b, bi))
                || (matches(&o.a, b, bi) && matches(&o.b, a, ai))
            {
                return o.ticks;
            }
        }
        self.config.base_latency(&a, &b)
    }

    fn in_group(&self, group: &[NodeRef], id: NodeId) -> bool {
        let i = self.index.get(&id).copied();
        group.iter().any(|r| match r {
            NodeRef::Address(x) => *x == id,
            NodeRef::Index(x) => Some(*x) == i,
        })
    }

    /// End tick of a partition separating `a` and `b` at `tick`, if any.
    pub fn separated_until(&self, a: NodeId, b: NodeId, tick: u64) -> Option<u64> {
        self.config
            .partitions
            .iter()
            .filter(|p| p.start <= tick && tick < p.end)
            .filter(|p| self.in_group(&p.group, a) != self.in_group(&p.group, b))
            .map(|p| p.end)
            .max()
    }

    fn delivery_tick(&self, from: NodeId, to: NodeId) -> u64 {
        let mut t = self.now;
        while let Some(end) = self.separated_until(from, to, t) {
            t = end;
        }
        t + self.latency(from, to)
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    fn emit(
        &mut self,
        kind: TraceKind,
        node: NodeId,
        peer: Option<NodeId>,
        digest: Option<Digest>,
        height: Option<u64>,
        detail: Option<String>,
    ) -> TraceEvent {
        self.trace_seq += 1;
        let ev = TraceEvent {
            tick: self.now,
            seq: self.trace_seq,
            kind,
            node,
            peer,
            digest,
            height,
            detail,
        };
        self.trace.push(ev.clone());
        ev
    }

    fn broadcast(&mut self, from: NodeId, message: Message) {
        let peers: Vec<NodeId> = self.node_ids().into_iter().filter(|p| *p != from).collect();
        for to in peers {
            let deliver_at = self.delivery_tick(from, to);
            let seq = self.next_seq();
            self.queue.insert(
                (deliver_at, seq),
                InFlight {
                    deliver_at,
                    seq,
                    from,
                    to,
                    message: message.clone(),
                },
            );
        }
    }

    /// Admits a node. Permissionless networks admit anyone as a validator;
    /// permissioned ones require an admin signature over the candidate address.
    pub fn join_node(
        &mut self,
        candidate: KeyPair,
        credential: Option<&Signature>,
    ) -> Result<NodeId, NetworkError> {
        let id = candidate.address();
        if self.index.contains_key(&id) {
            return Err(NetworkError::AlreadyJoined(id));
        }
        if self.config.mode == Mode::Permissioned {
            let ok = match (&self.config.admin_key, credential) {
                (Some(admin), Some(sig)) => verify_signature(&admin.0, &id.0, &sig.0),
                _ => false,
            };
            if !ok {
                self.emit(TraceKind::JoinRequest, id, None, None, None, Some("denied".into()));
                return Err(NetworkError::PermissionDenied);
            }
        }
        let (height, _) = self.canonical_head();
        let source = self
            .nodes
            .iter()
            .find(|n| (n.height(), n.head_digest()) == self.canonical_head())
            .expect("canonical head belongs to some node");
        let node = Node::new(candidate, true, source.chain.clone(), source.state.clone());
        self.validators.admit(id, height + 1);
        self.push_node(node);
        self.emit(
            TraceKind::JoinRequest,
            id,
            None,
            None,
            Some(height + 1),
            Some("admitted".into()),
        );
        Ok(id)
    }

    /// Pools `tx` at `node` and gossips it to every peer.
    pub fn submit_transaction(&mut self, node: NodeId, tx: Transaction) -> Result<Digest, NetworkError> {
        let i = self.idx(node)?;
        let digest = tx.digest();
        let seq = self.next_seq();
        let now = self.now;
        self.nodes[i].add_pending(seq, now, tx.clone());
        self.emit(TraceKind::TxSubmitted, node, None, Some(digest), None, None);
        self.broadcast(node, Message::Tx { tx: Box::new(tx) });
        Ok(digest)
    }

    /// Applies `tx` to `node`'s projected state without changing anything.
    pub fn dry_run(&self, node: NodeId, tx: &Transaction) -> Result<Outcome, TxError> {
        let n = self.node(node).map_err(|_| TxError::UnknownSender(tx.sender))?;
        let mut scratch = n.projected_state(self.now);
        apply_transaction(&mut scratch, tx, &n.id)
    }

    /// Nonce the next transaction from `sender` should carry, counting
    /// transactions already pooled at `node`.
    pub fn next_nonce(&self, node: NodeId, sender: &crate::keys::Address) -> Result<Option<u64>, NetworkError> {
        let n = self.node(node)?;
        Ok(n.projected_state(self.now).account(sender).map(|a| a.nonce))
    }

    /// Advances one tick: delivers due messages, then lets the scheduled
    /// proposer seal a block when the tick is a multiple of the interval.
    pub fn advance_tick(&mut self) -> Vec<TraceEvent> {
        let start = self.trace.len();
        self.now += 1;
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 > self.now {
                break;
            }
            let msg = entry.remove();
            self.deliver(msg);
        }
        if self.now.is_multiple_of(self.config.block_interval) {
            for i in 0..self.nodes.len() {
                self.maybe_propose(i);
            }
        }
        self.trace[start..].to_vec()
    }

    pub fn run_ticks(&mut self, ticks: u64) {
        for _ in 0..ticks {
            self.advance_tick();
        }
    }

    /// Steps until [`Network::is_quiescent`], returning the ticks taken.
    pub fn run_until_quiescent(&mut self, max_ticks: u64) -> Result<u64, NetworkError> {
        for taken in 0..=max_ticks {
            if self.is_quiescent() {
                return Ok(taken);
            }
            self.advance_tick();
        }
        Err(NetworkError::NotQuiescent(max_ticks))
    }

    fn deliver(&mut self, msg: InFlight) {
        let Ok(i) = self.idx(msg.to) else {
            return;
        };
        match msg.message {
            Message::Tx { tx } => {
                let digest = tx.digest();
                let seq = self.next_seq();
                let now = self.now;
                self.nodes[i].add_pending(seq, now, *tx);
                self.emit(TraceKind::TxGossip, msg.to, Some(msg.from), Some(digest), None, None);
            }
            Message::Block { block } => {
                self.emit(
                    TraceKind::BlockGossip,
                    msg.to,
                    Some(msg.from),
                    Some(block.header_digest()),
                    Some(block.height),
                    None,
                );
                self.handle_block(i, msg.from, *block);
            }
            Message::Envelope { envelope } => {
                let digest = envelope.digest();
                let reason = if envelope.expired_at(self.now) {
                    Some("expired")
                } else if !envelope.meets_difficulty(self.config.whisper_difficulty) {
                    Some("insufficient work")
                } else {
                    None
                };
                match reason {
                    Some(r) => {
                        self.emit(
                            TraceKind::EnvelopeDropped,
                            msg.to,
                            Some(msg.from),
                            Some(digest),
                            None,
                            Some(r.into()),
                        );
                    }
                    None => {
                        self.nodes[i].whisper.insert(envelope);
                        self.emit(TraceKind::EnvelopeGossip, msg.to, Some(msg.from), Some(digest), None, None);
                    }
                }
            }
        }
    }

    fn handle_block(&mut self, i: usize, from: NodeId, block: Block) {
        let digest = block.header_digest();
        let node = &self.nodes[i];
        let id = node.id;
        if node.hashes.get(block.height as usize) == Some(&digest) {
            return;
        }
        if block.height == node.height() + 1 && block.prev_hash == node.head_digest() {
            match validate_block(&node.state, &block, &self.validators) {
                Ok(next) => {
                    let node = &mut self.nodes[i];
                    node.state = next;
                    node.hashes.push(digest);
                    node.chain.push(block.clone());
                    node.prune_pending();
                    self.emit(TraceKind::BlockAppended, id, Some(from), Some(digest), Some(block.height), None);
                }
                Err(e) => {
                    self.emit(
                        TraceKind::BlockRejected,
                        id,
                        Some(from),
                        Some(digest),
                        Some(block.height),
                        Some(e.to_string()),
                    );
                }
            }
            return;
        }
        self.sync_from(i, from);
    }

    /// Adopts the sender's chain if fork choice prefers it.
    fn sync_from(&mut self, i: usize, from: NodeId) {
        let Ok(j) = self.idx(from) else {
            return;
        };
        let local_head = (self.nodes[i].height(), self.nodes[i].head_digest());
        let cand_head = (self.nodes[j].height(), self.nodes[j].head_digest());
        if !prefers_candidate(local_head, cand_head) {
            return;
        }
        let cand_chain = self.nodes[j].chain.clone();
        let cand_hashes = self.nodes[j].hashes.clone();
        let fork = self.nodes[i]
            .hashes
            .iter()
            .zip(&cand_hashes)
            .take_while(|(a, b)| a == b)
            .count();
        let id = self.nodes[i].id;

        if fork == self.nodes[i].chain.len() {
            let mut state = self.nodes[i].state.clone();
            let mut adopted = 0;
            for block in &cand_chain[fork..] {
                match validate_block(&state, block, &self.validators) {
                    Ok(next) => {
                        state = next;
                        adopted += 1;
                    }
                    Err(_) => break,
                }
            }
            if adopted == 0 {
                self.emit(TraceKind::BlockRejected, id, Some(from), None, None, Some("sync failed".into()));
                return;
            }
            let node = &mut self.nodes[i];
            node.state = state;
            node.chain.extend_from_slice(&cand_chain[fork..fork + adopted]);
            node.hashes.extend_from_slice(&cand_hashes[fork..fork + adopted]);
            node.prune_pending();
            let (h, d) = (node.height(), node.head_digest());
            self.emit(TraceKind::BlockAppended, id, Some(from), Some(d), Some(h), Some("sync".into()));
            return;
        }

        let state = match verify_chain(&cand_chain, &self.chain_rules()) {
            Ok(s) => s,
            Err(fault) => {
                self.emit(TraceKind::BlockRejected, id, Some(from), None, Some(fault.height), Some(fault.to_string()));
                return;
            }
        };
        let included: BTreeSet<Digest> = cand_chain[fork..]
            .iter()
            .flat_map(|b| b.transactions.iter().map(Transaction::digest))
            .collect();
        let orphaned: Vec<Transaction> = self.nodes[i].chain[fork..]
            .iter()
            .flat_map(|b| b.transactions.iter().cloned())
            .filter(|tx| !included.contains(&tx.digest()))
            .collect();
        {
            let node = &mut self.nodes[i];
            node.state = state;
            node.chain = cand_chain;
            node.hashes = cand_hashes;
        }
        for tx in orphaned {
            let seq = self.next_seq();
            let now = self.now;
            self.nodes[i].add_pending(seq, now, tx);
        }
        self.nodes[i].prune_pending();
        let (h, d) = (self.nodes[i].height(), self.nodes[i].head_digest());
        self.emit(
            TraceKind::ChainSwitched,
            id,
            Some(from),
            Some(d),
            Some(h),
            Some(format!("fork at height {}", fork.saturating_sub(1))),
        );
    }

    /// Packs node `i`'s pool into `scratch` in sequence order, retrying
    /// until no further transaction applies. Returns the included entries and
    /// those to drop: replays and bad signatures at once, other failures once
    /// they have sat in the pool for the retry window.
    fn select_pending(&self, i: usize, scratch: &mut ChainState) -> (Vec<(u64, Transaction)>, Vec<Dropped>) {
        let now = self.now;
        let retry = self.config.tx_retry_ticks;
        let max_txs = self.config.max_block_txs;
        let node = &self.nodes[i];
        let mut included: Vec<(u64, Transaction)> = Vec::new();
        let mut used = BTreeSet::new();
        let mut dropped: Vec<Dropped> = Vec::new();
        'passes: loop {
            let mut progress = false;
            for p in node.pending.values() {
                if included.len() >= max_txs {
                    break 'passes;
                }
                if used.contains(&p.seq) {
                    continue;
                }
                match apply_transaction(scratch, &p.tx, &node.id) {
                    Ok(_) => {
                        included.push((p.seq, p.tx.clone()));
                        used.insert(p.seq);
                        progress = true;
                    }
                    Err(TxError::NonceGap { .. }) => {}
                    Err(e @ (TxError::NonceReused { .. } | TxError::BadSignature)) => {
                        used.insert(p.seq);
                        dropped.push((p.seq, e.code().to_string()));
                    }
                    Err(e) => {
                        if now >= p.arrived_at.saturating_add(retry) {
                            used.insert(p.seq);
                            dropped.push((p.seq, e.code().to_string()));
                        }
                    }
                }
            }
            if !progress {
                break;
            }
        }
        (included, dropped)
    }

    fn drop_pending(&mut self, i: usize, dropped: Vec<Dropped>) {
        let id = self.nodes[i].id;
        for (seq, reason) in dropped {
            if let Some(p) = self.nodes[i].remove_pending(seq) {
                self.emit(TraceKind::TxDropped, id, None, Some(p.tx.digest()), None, Some(reason));
            }
        }
    }

    /// Off-schedule nodes expire their own failing transactions, so every
    /// pool eventually drains.
    fn expire_pending(&mut self, i: usize) {
        let now = self.now;
        let retry = self.config.tx_retry_ticks;
        let node = &self.nodes[i];
        if !node.pending.values().any(|p| now >= p.arrived_at.saturating_add(retry)) {
            return;
        }
        let mut scratch = node.state.clone();
        scratch.begin_block(now);
        let (_, dropped) = self.select_pending(i, &mut scratch);
        self.drop_pending(i, dropped);
    }

    fn maybe_propose(&mut self, i: usize) {
        let now = self.now;
        let node = &self.nodes[i];
        let height = node.height() + 1;
        if !node.validator || self.validators.proposer_for(height) != Some(node.id) {
            self.expire_pending(i);
            return;
        }
        if node.pending.is_empty() && !self.config.heartbeat_blocks {
            return;
        }

        let mut scratch = node.state.clone();
        scratch.begin_block(now);
        let (included, dropped) = self.select_pending(i, &mut scratch);
        self.drop_pending(i, dropped);
        if included.is_empty() && !self.config.heartbeat_blocks {
            return;
        }
        let node = &mut self.nodes[i];
        let id = node.id;
        let txs: Vec<Transaction> = included.iter().map(|(_, tx)| tx.clone()).collect();
        let block = Block::propose(&node.keypair, height, node.head_digest(), now, txs);
        scratch.finish_block(&block);
        let digest = block.header_digest();
        node.state = scratch;
        node.hashes.push(digest);
        node.chain.push(block.clone());
        for (seq, _) in &included {
            node.remove_pending(*seq);
        }
        node.prune_pending();
        let count = included.len();
        self.emit(
            TraceKind::BlockProposed,
            id,
            None,
            Some(digest),
            Some(height),
            Some(format!("{count} txs")),
        );
        self.broadcast(id, Message::Block { block: Box::new(block) });
    }

    /// Checks the work and gossips `envelope` from `origin`. Never touches
    /// the chain.
    pub fn post_envelope(&mut self, origin: NodeId, envelope: Envelope) -> Result<Digest, NetworkError> {
        let i = self.idx(origin)?;
        if envelope.ttl == 0 {
            return Err(WhisperError::BadTtl.into());
        }
        let difficulty = self.config.whisper_difficulty;
        if !envelope.meets_difficulty(difficulty) {
            return Err(WhisperError::InsufficientWork(difficulty).into());
        }
        let digest = envelope.digest();
        self.nodes[i].whisper.insert(envelope.clone());
        self.emit(TraceKind::EnvelopePosted, origin, None, Some(digest), None, None);
        self.broadcast(origin, Message::Envelope { envelope });
        Ok(digest)
    }

    pub fn subscribe(&mut self, node: NodeId, topic: Topic, key: TopicKey) -> Result<(), NetworkError> {
        let i = self.idx(node)?;
        self.nodes[i].whisper.subscribe(topic, key);
        Ok(())
    }

    /// Drains every decryptable, unexpired envelope matching the node's
    /// subscriptions, in `(posted_at, digest)` order.
    pub fn collect_messages(&mut self, node: NodeId) -> Result<Vec<(Topic, Vec<u8>)>, NetworkError> {
        let i = self.idx(node)?;
        let now = self.now;
        Ok(self.nodes[i].whisper.collect(now, None))
    }

    pub fn collect_topic(&mut self, node: NodeId, topic: Topic) -> Result<Vec<(Topic, Vec<u8>)>, NetworkError> {
        let i = self.idx(node)?;
        let now = self.now;
        Ok(self.nodes[i].whisper.collect(now, Some(topic)))
    }

    /// Removes every envelope with `posted_at + ttl <= now` from all pools.
    pub fn purge_expired(&mut self, now: u64) -> usize {
        self.nodes.iter_mut().map(|n| n.whisper.purge_expired(now)).sum()
    }

    pub fn snapshot(&self) -> NetworkSnapshot {
        NetworkSnapshot {
            config: self.config.clone(),
            genesis: self.genesis.clone(),
            validators: self.validators.clone(),
            now: self.now,
            seq: self.seq,
            trace_seq: self.trace_seq,
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeSnapshot {
                    id: n.id,
                    seed: n.keypair.seed,
                    validator: n.validator,
                    height: n.height(),
                    head: n.head_digest(),
                    pending: n.pending.values().cloned().collect(),
                })
                .collect(),
            in_flight: self
                .queue
                .values()
                .filter(|m| !matches!(m.message, Message::Envelope { .. }))
                .cloned()
                .collect(),
        }
    }

    /// Rebuilds a network from a snapshot and one verified block log per node.
    pub fn restore(
        snapshot: NetworkSnapshot,
        mut chains: BTreeMap<NodeId, Vec<Block>>,
    ) -> Result<Network, NetworkError> {
        let corrupt = |m: String| NetworkError::CorruptSnapshot(m);
        snapshot.config.validate()?;
        let genesis_digest = snapshot.genesis.header_digest();
        let rules = ChainRules {
            validators: Some(snapshot.validators.clone()),
            genesis_anchor: Some(genesis_digest),
        };
        let mut net = Network {
            config: snapshot.config,
            genesis: snapshot.genesis,
            genesis_digest,
            validators: snapshot.validators,
            nodes: Vec::new(),
            index: BTreeMap::new(),
            now: snapshot.now,
            seq: snapshot.seq,
            trace_seq: snapshot.trace_seq,
            queue: BTreeMap::new(),
            trace: Vec::new(),
        };
        if snapshot.nodes.is_empty() {
            return Err(corrupt("no nodes".into()));
        }
        for ns in snapshot.nodes {
            let kp = generate_keypair(ns.seed);
            if kp.address() != ns.id {
                return Err(corrupt(format!("seed does not match node {}", ns.id)));
            }
            let chain = chains
                .remove(&ns.id)
                .ok_or_else(|| corrupt(format!("missing block log for node {}", ns.id)))?;
            let state = verify_chain(&chain, &rules)
                .map_err(|fault| NetworkError::InvalidChain { node: ns.id, fault })?;
            if state.height != ns.height || state.head_digest != ns.head {
                return Err(corrupt(format!("node {} head does not match its block log", ns.id)));
            }
            let mut node = Node::new(kp, ns.validator, chain, state);
            for p in ns.pending {
                node.add_pending(p.seq, p.arrived_at, p.tx);
            }
            net.push_node(node);
        }
        for m in snapshot.in_flight {
            net.queue.insert((m.deliver_at, m.seq), m);
        }
        Ok(net)
    }

    pub fn write_trace_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let mut out = Vec::new();
        for ev in &self.trace {
            out.extend_from_slice(&canonical_json(ev));
            out.push(b'\n');
        }
        std::fs::write(path, out)
    }
}
