//! Fixtures shared by the integration suites.
#![allow(dead_code)]

use rentledger_core::consensus::{create_network, GenesisSpec, Network, NetworkConfig, NodeId};
use rentledger_core::keys::{generate_keypair, Address, Digest, KeyPair, Seed};
use rentledger_core::ledger::{Allocation, ContractCall, LedgerParams, Transaction};

pub const VALIDATOR_BASE: u64 = 9_001;

pub fn kp(seed: u64) -> KeyPair {
    generate_keypair(Seed::from_u64(seed))
}

pub fn addr(seed: u64) -> Address {
    kp(seed).address()
}

/// `validators` nodes seeded from [`VALIDATOR_BASE`]; each user seed gets
/// `balance`.
pub fn network(validators: u64, users: &[u64], balance: u64, config: NetworkConfig) -> Network {
    network_with(validators, users, balance, config, LedgerParams::default())
}

pub fn network_with(
    validators: u64,
    users: &[u64],
    balance: u64,
    config: NetworkConfig,
    params: LedgerParams,
) -> Network {
    let genesis = GenesisSpec {
        allocations: users
            .iter()
            .map(|s| Allocation {
                address: addr(*s),
                amount: balance,
            })
            .collect(),
        params,
    };
    let keys = (0..validators).map(|i| kp(VALIDATOR_BASE + i)).collect();
    create_network(config, genesis, keys).expect("network")
}

pub fn node(net: &Network, i: usize) -> NodeId {
    net.node_ids()[i]
}

/// Signs a call from `seed` with the nonce `node` expects next.
pub fn signed(net: &Network, node: NodeId, seed: u64, payload: ContractCall, gas_limit: u64) -> Transaction {
    let k = kp(seed);
    let nonce = net
        .next_nonce(node, &k.address())
        .expect("node")
        .expect("funded sender");
    Transaction::signed(&k, nonce, payload, gas_limit)
}

pub fn transfer(net: &mut Network, node: NodeId, from: u64, to: u64, amount: u64) -> Digest {
    let tx = signed(net, node, from, ContractCall::PlainTransfer { to: addr(to), amount }, 1);
    net.submit_transaction(node, tx).expect("submit")
}

/// Every transaction digest on `node`'s chain.
pub fn included(net: &Network, node: NodeId) -> Vec<Digest> {
    net.node(node)
        .expect("node")
        .chain()
        .iter()
        .flat_map(|b| b.transactions.iter().map(|t| t.digest()))
        .collect()
}

/// [`transfer`] through the node at creation index `i`.
pub fn send(net: &mut Network, i: usize, from: u64, to: u64, amount: u64) -> Digest {
    let id = node(net, i);
    transfer(net, id, from, to, amount)
}

/// Single-proposer ledger driven directly through `apply_transaction`.
pub struct Desk {
    pub state: rentledger_core::ledger::ChainState,
    proposer: Address,
}

impl Desk {
    pub fn new(balances: &[(u64, u64)]) -> Desk {
        use rentledger_core::ledger::{Block, ChainState, Genesis};
        let genesis = Block::genesis(Genesis {
            allocations: balances
                .iter()
                .map(|(s, amount)| Allocation {
                    address: addr(*s),
                    amount: *amount,
                })
                .collect(),
            validators: vec![addr(VALIDATOR_BASE)],
            params: LedgerParams::default(),
        });
        Desk {
            state: ChainState::from_genesis(&genesis).expect("genesis"),
            proposer: addr(VALIDATOR_BASE),
        }
    }

    pub fn exec(
        &mut self,
        seed: u64,
        payload: ContractCall,
    ) -> Result<rentledger_core::ledger::Outcome, rentledger_core::ledger::TxError> {
        let k = kp(seed);
        let nonce = self.state.account(&k.address()).map_or(0, |a| a.nonce);
        let gas = self.state.params.gas.cost(payload.kind());
        let tx = Transaction::signed(&k, nonce, payload, gas);
        rentledger_core::ledger::apply_transaction(&mut self.state, &tx, &self.proposer)
    }

    pub fn at(&mut self, tick: u64) {
        self.state.begin_block(tick);
    }

    pub fn register(&mut self, seed: u64) {
        let doc = rentledger_core::keys::digest_bytes(format!("docs-{seed}").as_bytes());
        self.exec(seed, ContractCall::RegisterUser { kyc_doc_digest: doc })
            .expect("register");
    }

    pub fn list(&mut self, seed: u64, price: u64) -> Digest {
        use rentledger_core::ledger::Outcome;
        use rentledger_core::market::Location;
        let call = ContractCall::ListAsset {
            metadata_digest: Digest::ZERO,
            location: Location::from_degrees(0.0, 0.0),
            price_per_tick: price,
            sensitive: false,
        };
        match self.exec(seed, call).expect("list") {
            Outcome::AssetListed { asset_id } => asset_id,
            other => panic!("unexpected {other:?}"),
        }
    }

    pub fn open(&mut self, seed: u64, asset_id: Digest, start: u64, end: u64) {
        let window = rentledger_core::market::Window::new(start, end);
        self.exec(seed, ContractCall::SetAvailability { asset_id, window })
            .expect("availability");
    }

    pub fn book(
        &mut self,
        seed: u64,
        asset_id: Digest,
        start: u64,
        end: u64,
    ) -> Result<Digest, rentledger_core::ledger::TxError> {
        use rentledger_core::ledger::Outcome;
        let window = rentledger_core::market::Window::new(start, end);
        match self.exec(seed, ContractCall::BookAsset { asset_id, window, deposit: 0 })? {
            Outcome::Booked { booking } => Ok(booking.booking_id),
            other => panic!("unexpected {other:?}"),
        }
    }
}
