//! Single-proposer ledger fixture for unit tests.

use crate::keys::{generate_keypair, Address, Digest, KeyPair, Seed};
use crate::ledger::{
    apply_transaction, Allocation, Block, ChainState, ContractCall, Genesis, LedgerParams, Outcome,
    Transaction, TxError,
};
use crate::market::{kyc_attestation_message, Location, Window};

pub const PROPOSER: u64 = 900;
pub const ATTESTOR: u64 = 901;
pub const REGISTRAR: u64 = 902;

pub fn kp(seed: u64) -> KeyPair {
    generate_keypair(Seed::from_u64(seed))
}

pub fn addr(seed: u64) -> Address {
    kp(seed).address()
}

pub fn genesis_block(balances: &[(u64, u64)], params: LedgerParams) -> Block {
    Block::genesis(Genesis {
        allocations: balances
            .iter()
            .map(|(s, amount)| Allocation {
                address: addr(*s),
                amount: *amount,
            })
            .collect(),
        validators: vec![addr(PROPOSER)],
        params,
    })
}

pub fn default_params() -> LedgerParams {
    LedgerParams {
        attestor_key: Some(kp(ATTESTOR).public_key),
        registrar_key: Some(kp(REGISTRAR).public_key),
        ..LedgerParams::default()
    }
}

pub struct World {
    pub state: ChainState,
}

impl World {
    pub fn new(balances: &[(u64, u64)]) -> World {
        Self::with_params(balances, default_params())
    }

    pub fn with_params(balances: &[(u64, u64)], params: LedgerParams) -> World {
        let state = ChainState::from_genesis(&genesis_block(balances, params)).expect("genesis");
        World { state }
    }

    pub fn tx(&self, seed: u64, payload: ContractCall) -> Transaction {
        let k = kp(seed);
        let nonce = self.state.account(&k.address()).map_or(0, |a| a.nonce);
        let gas = self.state.params.gas.cost(payload.kind());
        Transaction::signed(&k, nonce, payload, gas)
    }

    pub fn exec(&mut self, seed: u64, payload: ContractCall) -> Result<Outcome, TxError> {
        let tx = self.tx(seed, payload);
        apply_transaction(&mut self.state, &tx, &addr(PROPOSER))
    }

    pub fn at(&mut self, tick: u64) -> &mut Self {
        self.state.begin_block(tick);
        self
    }

    pub fn balance(&self, seed: u64) -> u64 {
        self.state.balance(&addr(seed))
    }

    pub fn locked(&self, seed: u64) -> u64 {
        self.state.locked(&addr(seed))
    }

    pub fn register(&mut self, seed: u64) {
        let digest = crate::keys::digest_bytes(format!("docs-{seed}").as_bytes());
        self.exec(seed, ContractCall::RegisterUser { kyc_doc_digest: digest })
            .expect("register");
    }

    pub fn attest(&mut self, seed: u64) {
        let user = addr(seed);
        let digest = self.state.users[&user].kyc_doc_digest;
        let sig = kp(ATTESTOR).sign(&kyc_attestation_message(&user, &digest));
        self.exec(
            ATTESTOR,
            ContractCall::AttestKyc {
                user,
                attestor_signature: sig,
            },
        )
        .expect("attest");
    }

    pub fn list(&mut self, seed: u64, price: u64) -> Digest {
        let out = self
            .exec(
                seed,
                ContractCall::ListAsset {
                    metadata_digest: crate::keys::digest_bytes(b"meta"),
                    location: Location::from_degrees(10.0, 20.0),
                    price_per_tick: price,
                    sensitive: false,
                },
            )
            .expect("list");
        match out {
            Outcome::AssetListed { asset_id } => asset_id,
            other => panic!("unexpected {other:?}"),
        }
    }

    pub fn open(&mut self, seed: u64, asset_id: Digest, start: u64, end: u64) {
        self.exec(
            seed,
            ContractCall::SetAvailability {
                asset_id,
                window: Window::new(start, end),
            },
        )
        .expect("availability");
    }

    pub fn book(&mut self, seed: u64, asset_id: Digest, start: u64, end: u64, deposit: u64) -> Result<Digest, TxError> {
        match self.exec(
            seed,
            ContractCall::BookAsset {
                asset_id,
                window: Window::new(start, end),
                deposit,
            },
        )? {
            Outcome::Booked { booking } => Ok(booking.booking_id),
            other => panic!("unexpected {other:?}"),
        }
    }
}

impl World {
    pub fn install(&mut self, owner: u64, device_seed: u64, asset_id: Digest, tariff: u64) -> Digest {
        let device_public_key = kp(device_seed).public_key;
        let id = crate::iot::device_id_for(&device_public_key);
        self.exec(
            owner,
            ContractCall::RegisterDevice {
                asset_id,
                device_public_key,
                tariff,
            },
        )
        .expect("register device");
        id
    }

    /// Records a usage event stamped `at`, submitted by `submitter`.
    pub fn meter(&mut self, submitter: u64, device_seed: u64, units: u64, at: u64) -> Result<Outcome, TxError> {
        let event = crate::iot::UsageEvent::signed(&kp(device_seed), units, at);
        self.exec(submitter, ContractCall::RecordUsage { event })
    }
}
