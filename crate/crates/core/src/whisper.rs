//! Off-chain pub/sub: topic-addressed, symmetrically encrypted envelopes with
//! a TTL and a proof-of-work nonce. Envelopes never touch the chain.

use std::collections::BTreeMap;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Nonce};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, canonical_json, hex_newtype};
use crate::keys::{digest_bytes, digest_parts, Digest};

pub const DEFAULT_DIFFICULTY: u32 = 8;
const AEAD_NONCE_LEN: usize = 12;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WhisperError {
    #[error("ttl must be at least 1")]
    BadTtl,
    #[error("payload is empty")]
    EmptyPayload,
    #[error("envelope does not meet difficulty {0}")]
    InsufficientWork(u32),
}

impl WhisperError {
    pub fn code(&self) -> &'static str {
        match self {
            WhisperError::BadTtl => "BadTtl",
            WhisperError::EmptyPayload => "EmptyPayload",
            WhisperError::InsufficientWork(_) => "InsufficientWork",
        }
    }
}

/// 4-byte topic, rendered as `0x` + 8 hex chars.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Topic(pub [u8; 4]);
hex_newtype!(Topic, 4);

impl Topic {
    /// Topic named by the first four bytes of `digest(label)`.
    pub fn from_label(label: &str) -> Topic {
        let d = digest_bytes(label.as_bytes());
        Topic([d.0[0], d.0[1], d.0[2], d.0[3]])
    }
}

/// Pre-shared symmetric key for one topic.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TopicKey(pub [u8; 32]);
hex_newtype!(TopicKey, 32);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope {
    pub topic: Topic,
    pub posted_at: u64,
    pub ttl: u64,
    pub nonce: u64,
    /// AEAD nonce followed by ciphertext and tag.
    #[serde(with = "codec::hex_bytes")]
    pub ciphertext: Vec<u8>,
}

impl Envelope {
    /// `digest(topic ‖ posted_at ‖ ttl ‖ ciphertext ‖ nonce)`, integers big-endian.
    pub fn work_digest(&self) -> Digest {
        work_digest(&self.topic, self.posted_at, self.ttl, &self.ciphertext, self.nonce)
    }

    pub fn meets_difficulty(&self, difficulty: u32) -> bool {
        self.work_digest().leading_zero_bits() >= difficulty
    }

    /// Identity used for ordering and de-duplication.
    pub fn digest(&self) -> Digest {
        digest_bytes(&canonical_json(self))
    }

    /// Expired once `now >= posted_at + ttl`.
    pub fn expired_at(&self, now: u64) -> bool {
        now >= self.posted_at.saturating_add(self.ttl)
    }
}

fn work_digest(topic: &Topic, posted_at: u64, ttl: u64, ciphertext: &[u8], nonce: u64) -> Digest {
    digest_parts(&[
        &topic.0,
        &posted_at.to_be_bytes(),
        &ttl.to_be_bytes(),
        ciphertext,
        &nonce.to_be_bytes(),
    ])
}

fn associated_data(topic: &Topic, posted_at: u64, ttl: u64) -> Vec<u8> {
    [&topic.0[..], &posted_at.to_be_bytes(), &ttl.to_be_bytes()].concat()
}

/// Encrypts `payload` under `key` and searches nonces from 0 upward until the
/// work digest has `difficulty` leading zero bits.
pub fn seal_envelope(
    topic: Topic,
    payload: &[u8],
    ttl: u64,
    key: &TopicKey,
    difficulty: u32,
    posted_at: u64,
) -> Result<Envelope, WhisperError> {
    if ttl == 0 {
        return Err(WhisperError::BadTtl);
    }
    if payload.is_empty() {
        return Err(WhisperError::EmptyPayload);
    }
    let cipher = ChaCha20Poly1305::new((&key.0).into());
    let derived = digest_parts(&[b"whisper-aead", &topic.0, &posted_at.to_be_bytes(), payload]);
    let aead_nonce = &derived.0[..AEAD_NONCE_LEN];
    let sealed = cipher
        .encrypt(
            Nonce::from_slice(aead_nonce),
            Payload {
                msg: payload,
                aad: &associated_data(&topic, posted_at, ttl),
            },
        )
        .expect("ChaCha20Poly1305 encryption is infallible for in-memory buffers");
    let ciphertext = [aead_nonce, &sealed[..]].concat();
    let nonce = (0u64..)
        .find(|n| work_digest(&topic, posted_at, ttl, &ciphertext, *n).leading_zero_bits() >= difficulty)
        .expect("nonce space exhausted");
    Ok(Envelope {
        topic,
        posted_at,
        ttl,
        nonce,
        ciphertext,
    })
}

/// Authenticated decryption; `None` on a wrong key or any tampering.
pub fn open_envelope(envelope: &Envelope, key: &TopicKey) -> Option<Vec<u8>> {
    if envelope.ciphertext.len() < AEAD_NONCE_LEN {
        return None;
    }
    let (nonce, body) = envelope.ciphertext.split_at(AEAD_NONCE_LEN);
    ChaCha20Poly1305::new((&key.0).into())
        .decrypt(
            Nonce::from_slice(nonce),
            Payload {
                msg: body,
                aad: &associated_data(&envelope.topic, envelope.posted_at, envelope.ttl),
            },
        )
        .ok()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subscription {
    pub topic: Topic,
    pub key: TopicKey,
}

/// One node's envelope pool and subscriptions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WhisperPool {
    envelopes: BTreeMap<(u64, Digest), Envelope>,
    subscriptions: Vec<Subscription>,
}

impl WhisperPool {
    /// Returns false if the envelope was already pooled.
    pub fn insert(&mut self, envelope: Envelope) -> bool {
        let key = (envelope.posted_at, envelope.digest());
        if self.envelopes.contains_key(&key) {
            return false;
        }
        self.envelopes.insert(key, envelope);
        true
    }

    pub fn contains(&self, envelope: &Envelope) -> bool {
        self.envelopes
            .contains_key(&(envelope.posted_at, envelope.digest()))
    }

    pub fn len(&self) -> usize {
        self.envelopes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envelopes.is_empty()
    }

    pub fn envelopes(&self) -> impl Iterator<Item = &Envelope> {
        self.envelopes.values()
    }

    pub fn subscribe(&mut self, topic: Topic, key: TopicKey) {
        let sub = Subscription { topic, key };
        if !self.subscriptions.contains(&sub) {
            self.subscriptions.push(sub);
        }
    }

    pub fn subscriptions(&self) -> &[Subscription] {
        &self.subscriptions
    }

    /// Removes and returns every unexpired envelope that matches a
    /// subscription (optionally restricted to `only`) and decrypts under its
    /// key, in `(posted_at, digest)` order.
    pub fn collect(&mut self, now: u64, only: Option<Topic>) -> Vec<(Topic, Vec<u8>)> {
        let mut delivered = Vec::new();
        let mut out = Vec::new();
        for (key, env) in &self.envelopes {
            if env.expired_at(now) || only.is_some_and(|t| t != env.topic) {
                continue;
            }
            let plain = self
                .subscriptions
                .iter()
                .filter(|s| s.topic == env.topic)
                .find_map(|s| open_envelope(env, &s.key));
            if let Some(plain) = plain {
                delivered.push(*key);
                out.push((env.topic, plain));
            }
        }
        for key in delivered {
            self.envelopes.remove(&key);
        }
        out
    }

    pub fn purge_expired(&mut self, now: u64) -> usize {
        let before = self.envelopes.len();
        self.envelopes.retain(|_, e| !e.expired_at(now));
        before - self.envelopes.len()
    }
}
