use std::path::Path;

use rentledger_core::consensus::{create_network, is_yaml, GenesisSpec, Network, NetworkConfig};
use rentledger_core::keys::{generate_keypair, Address, Seed};
use rentledger_core::ledger::{Allocation, LedgerParams};
use serde::{Deserialize, Serialize};

use crate::ServiceError;

/// Genesis funding, by address or by the seed that derives it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Funding {
    Seed { seed: u64, amount: u64 },
    Address { address: Address, amount: u64 },
}

impl Funding {
    fn allocation(&self) -> Allocation {
        match self {
            Funding::Seed { seed, amount } => Allocation {
                address: generate_keypair(Seed::from_u64(*seed)).address(),
                amount: *amount,
            },
            Funding::Address { address, amount } => Allocation {
                address: *address,
                amount: *amount,
            },
        }
    }
}

/// How a fresh data directory builds its network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub network: NetworkConfig,
    /// Key seeds of the founding validators.
    pub validators: Vec<u64>,
    pub allocations: Vec<Funding>,
    pub params: LedgerParams,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            network: NetworkConfig::default(),
            validators: (9001..9005).collect(),
            allocations: Vec::new(),
            params: LedgerParams::default(),
        }
    }
}

impl ServiceConfig {
    /// Reads JSON, or YAML for `.yaml`/`.yml`.
    pub fn from_path(path: &Path) -> Result<Self, ServiceError> {
        let bad = |e: String| ServiceError::BadConfig(format!("{}: {e}", path.display()));
        let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
        if is_yaml(path) {
            serde_yaml::from_str(&text).map_err(|e| bad(e.to_string()))
        } else {
            serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
        }
    }

    pub fn build(&self) -> Result<Network, ServiceError> {
        let validators = self
            .validators
            .iter()
            .map(|s| generate_keypair(Seed::from_u64(*s)))
            .collect();
        let genesis = GenesisSpec {
            allocations: self.allocations.iter().map(Funding::allocation).collect(),
            params: self.params.clone(),
        };
        create_network(self.network.clone(), genesis, validators).map_err(|e| ServiceError::BadConfig(e.to_string()))
    }
}
