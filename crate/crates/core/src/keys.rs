//! Key generation, addresses, signatures and hashing.
//!
//! Keys are Ed25519 (deterministic signatures) and the hash is SHA-256. Every
//! other module goes through the functions here, so swapping the scheme only
//! touches this file.

use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::codec::{self, hex_newtype};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KeyError {
    #[error("public key is empty")]
    EmptyKey,
    #[error("private key is malformed")]
    InvalidKey,
}

/// 32-byte hash output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);
hex_newtype!(Digest, 32);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);

    /// Number of leading zero bits, most significant bit of byte 0 first.
    pub fn leading_zero_bits(&self) -> u32 {
        let mut bits = 0;
        for byte in self.0 {
            if byte == 0 {
                bits += 8;
            } else {
                bits += byte.leading_zeros();
                break;
            }
        }
        bits
    }
}

/// Account address: the digest of a public key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Address(pub [u8; 32]);
hex_newtype!(Address, 32);

/// 32-byte key seed.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Seed(pub [u8; 32]);
hex_newtype!(Seed, 32);

impl Seed {
    /// Big-endian embedding into the low 8 bytes, so `from_u64(1)` is `0x00..01`.
    pub fn from_u64(n: u64) -> Seed {
        let mut bytes = [0; 32];
        bytes[24..].copy_from_slice(&n.to_be_bytes());
        Seed(bytes)
    }
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PublicKey(#[serde(with = "codec::hex_bytes")] pub Vec<u8>);

impl std::fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PublicKey({})", codec::to_hex(&self.0))
    }
}

impl std::fmt::Display for PublicKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&codec::to_hex(&self.0))
    }
}

impl std::str::FromStr for PublicKey {
    type Err = codec::HexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        codec::from_hex(s).map(PublicKey)
    }
}

impl PublicKey {
    pub fn address(&self) -> Result<Address, KeyError> {
        derive_address(&self.0)
    }
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrivateKey(#[serde(with = "codec::hex_bytes")] pub Vec<u8>);

impl std::fmt::Debug for PrivateKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("PrivateKey(..)")
    }
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Signature(#[serde(with = "codec::hex_bytes")] pub Vec<u8>);

impl std::fmt::Debug for Signature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Signature({})", codec::to_hex(&self.0))
    }
}

impl std::fmt::Display for Signature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&codec::to_hex(&self.0))
    }
}

impl std::str::FromStr for Signature {
    type Err = codec::HexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        codec::from_hex(s).map(Signature)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyPair {
    pub seed: Seed,
    pub public_key: PublicKey,
    pub private_key: PrivateKey,
}

impl KeyPair {
    pub fn address(&self) -> Address {
        derive_address(&self.public_key.0).expect("generated keys are never empty")
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        sign_bytes(&self.private_key, message).expect("generated keys are well formed")
    }
}

pub fn generate_keypair(seed: Seed) -> KeyPair {
    let signing = SigningKey::from_bytes(&seed.0);
    KeyPair {
        seed,
        public_key: PublicKey(signing.verifying_key().to_bytes().to_vec()),
        private_key: PrivateKey(signing.to_bytes().to_vec()),
    }
}

pub fn derive_address(public_key: &[u8]) -> Result<Address, KeyError> {
    if public_key.is_empty() {
        return Err(KeyError::EmptyKey);
    }
    Ok(Address(digest_bytes(public_key).0))
}

/// Signs `digest(message)`.
pub fn sign_bytes(private_key: &PrivateKey, message: &[u8]) -> Result<Signature, KeyError> {
    let bytes: [u8; 32] = private_key
        .0
        .as_slice()
        .try_into()
        .map_err(|_| KeyError::InvalidKey)?;
    let signing = SigningKey::from_bytes(&bytes);
    let sig = signing.sign(&digest_bytes(message).0);
    Ok(Signature(sig.to_bytes().to_vec()))
}

/// Malformed keys or signatures verify as `false`.
pub fn verify_signature(public_key: &[u8], message: &[u8], signature: &[u8]) -> bool {
    let Ok(key_bytes) = <[u8; 32]>::try_from(public_key) else {
        return false;
    };
    let Ok(key) = VerifyingKey::from_bytes(&key_bytes) else {
        return false;
    };
    let Ok(sig) = ed25519_dalek::Signature::from_slice(signature) else {
        return false;
    };
    key.verify_strict(&digest_bytes(message).0, &sig).is_ok()
}

pub fn digest_bytes(input: &[u8]) -> Digest {
    Digest(Sha256::digest(input).into())
}

/// Digest over the concatenation of several parts.
pub fn digest_parts(parts: &[&[u8]]) -> Digest {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part);
    }
    Digest(hasher.finalize().into())
}
