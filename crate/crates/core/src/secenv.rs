//! AES-128/EAX envelopes for chunk payloads.
//!
//! Wire layout (little-endian):
//!
//! ```text
//! "PFE1" | version u8 | round u64 | client u32 | payload_len u32 | nonce[16] | tag[16] | ciphertext
//! ```
//!
//! The 21 header bytes are authenticated as associated data, so a relay
//! cannot move a chunk to another round or client without breaking the tag.

use std::collections::HashMap;
use std::fmt;

use aes::Aes128;
use eax::aead::generic_array::GenericArray;
use eax::aead::{AeadInPlace, KeyInit};
use eax::Eax;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"PFE1";
pub const VERSION: u8 = 0x01;
pub const KEY_LEN: usize = 16;
pub const NONCE_LEN: usize = 16;
pub const TAG_LEN: usize = 16;
/// Magic, version, round, client id and payload length.
pub const HEADER_LEN: usize = 4 + 1 + 8 + 4 + 4;
/// Nonce plus tag: the per-message cost of encryption.
pub const AEAD_OVERHEAD: usize = NONCE_LEN + TAG_LEN;
/// Everything in a framed envelope except the ciphertext.
pub const FRAME_OVERHEAD: usize = HEADER_LEN + AEAD_OVERHEAD;

type Aes128Eax = Eax<Aes128>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SecError {
    /// Tag verification failed: the envelope was tampered with or sealed
    /// under another key. Training must halt.
    #[error("authentication failure")]
    AuthFailure,
    #[error("replayed or out-of-order envelope from client {client}: round {got}, expected {expected}")]
    Replay { client: u32, got: u64, expected: u64 },
    #[error("payload of {0} bytes exceeds the 32-bit length field")]
    PayloadTooLarge(usize),
    #[error("malformed envelope: {0}")]
    Malformed(&'static str),
    #[error("entropy source unavailable: {0}")]
    Entropy(String),
}

/// 128-bit shared key. Deliberately not `Display`/serializable.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey([u8; KEY_LEN]);

impl SecretKey {
    pub fn from_bytes(bytes: [u8; KEY_LEN]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

/// Fresh key from the operating system's entropy source.
pub fn keygen() -> Result<SecretKey, SecError> {
    let mut k = [0u8; KEY_LEN];
    getrandom::getrandom(&mut k).map_err(|e| SecError::Entropy(e.to_string()))?;
    Ok(SecretKey(k))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub round: u64,
    pub client: u32,
    pub payload_len: u32,
}

impl Header {
    pub fn new(round: u64, client: u32, payload_len: u32) -> Self {
        Self {
            version: VERSION,
            round,
            client,
            payload_len,
        }
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..4].copy_from_slice(&MAGIC);
        out[4] = self.version;
        out[5..13].copy_from_slice(&self.round.to_le_bytes());
        out[13..17].copy_from_slice(&self.client.to_le_bytes());
        out[17..21].copy_from_slice(&self.payload_len.to_le_bytes());
        out
    }

    /// Parses the fixed header. Only magic is checked here; version policy
    /// belongs to the framing layer.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SecError> {
        if bytes.len() < HEADER_LEN {
            return Err(SecError::Malformed("short header"));
        }
        if bytes[..4] != MAGIC {
            return Err(SecError::Malformed("bad magic"));
        }
        Ok(Self {
            version: bytes[4],
            round: u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")),
            client: u32::from_le_bytes(bytes[13..17].try_into().expect("4 bytes")),
            payload_len: u32::from_le_bytes(bytes[17..21].try_into().expect("4 bytes")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub header: Header,
    pub nonce: [u8; NONCE_LEN],
    pub tag: [u8; TAG_LEN],
    pub ciphertext: Vec<u8>,
}

impl Envelope {
    /// Total framed size in bytes.
    pub fn wire_len(&self) -> usize {
        FRAME_OVERHEAD + self.ciphertext.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&self.header.to_bytes());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.tag);
        out.extend_from_slice(&self.ciphertext);
        out
    }

    /// Parses exactly one framed envelope occupying all of `bytes`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SecError> {
        let header = Header::from_bytes(bytes)?;
        if bytes.len() != FRAME_OVERHEAD + header.payload_len as usize {
            return Err(SecError::Malformed("length does not match header"));
        }
        let mut nonce = [0u8; NONCE_LEN];
        nonce.copy_from_slice(&bytes[HEADER_LEN..HEADER_LEN + NONCE_LEN]);
        let mut tag = [0u8; TAG_LEN];
        tag.copy_from_slice(&bytes[HEADER_LEN + NONCE_LEN..FRAME_OVERHEAD]);
        Ok(Self {
            header,
            nonce,
            tag,
            ciphertext: bytes[FRAME_OVERHEAD..].to_vec(),
        })
    }
}

/// Encrypts `payload` under a fresh random nonce, binding the header.
pub fn seal(
    key: &SecretKey,
    round: u64,
    client: u32,
    payload: &[u8],
) -> Result<Envelope, SecError> {
    let mut nonce = [0u8; NONCE_LEN];
    getrandom::getrandom(&mut nonce).map_err(|e| SecError::Entropy(e.to_string()))?;
    seal_with_nonce(key, round, client, payload, nonce)
}

/// [`seal`] with a caller-chosen nonce. Reusing a nonce under the same key
/// destroys confidentiality; this exists for known-answer tests.
pub fn seal_with_nonce(
    key: &SecretKey,
    round: u64,
    client: u32,
    payload: &[u8],
    nonce: [u8; NONCE_LEN],
) -> Result<Envelope, SecError> {
    let len = u32::try_from(payload.len()).map_err(|_| SecError::PayloadTooLarge(payload.len()))?;
    let header = Header::new(round, client, len);
    let cipher = Aes128Eax::new(GenericArray::from_slice(key.as_bytes()));
    let mut ciphertext = payload.to_vec();
    let tag = cipher
        .encrypt_in_place_detached(
            GenericArray::from_slice(&nonce),
            &header.to_bytes(),
            &mut ciphertext,
        )
        .map_err(|_| SecError::PayloadTooLarge(payload.len()))?;
    Ok(Envelope {
        header,
        nonce,
        tag: tag.into(),
        ciphertext,
    })
}

/// Verifies and decrypts. Plaintext is only released if the tag over
/// header and ciphertext verifies.
pub fn open(key: &SecretKey, env: &Envelope) -> Result<Vec<u8>, SecError> {
    if env.header.payload_len as usize != env.ciphertext.len() {
        return Err(SecError::AuthFailure);
    }
    let cipher = Aes128Eax::new(GenericArray::from_slice(key.as_bytes()));
    let mut buf = env.ciphertext.clone();
    cipher
        .decrypt_in_place_detached(
            GenericArray::from_slice(&env.nonce),
            &env.header.to_bytes(),
            &mut buf,
            GenericArray::from_slice(&env.tag),
        )
        .map_err(|_| SecError::AuthFailure)?;
    Ok(buf)
}

/// Receiver-side replay defense: one envelope per sender per round, and
/// only for the round currently being processed.
#[derive(Debug, Clone, Default)]
pub struct ReplayGuard {
    last_round: HashMap<u32, u64>,
}

impl ReplayGuard {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn check(&mut self, header: &Header, expected_round: u64) -> Result<(), SecError> {
        let stale = self
            .last_round
            .get(&header.client)
            .is_some_and(|&last| last >= header.round);
        if header.round != expected_round || stale {
            return Err(SecError::Replay {
                client: header.client,
                got: header.round,
                expected: expected_round,
            });
        }
        self.last_round.insert(header.client, header.round);
        Ok(())
    }

    pub fn highest_round(&self, client: u32) -> Option<u64> {
        self.last_round.get(&client).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key() -> SecretKey {
        SecretKey::from_bytes(*b"0123456789abcdef")
    }

    #[test]
    fn roundtrip_and_length_preservation() {
        let payload: Vec<u8> = (0..1000u32).map(|i| (i * 7) as u8).collect();
        let env = seal(&key(), 3, 9, &payload).unwrap();
        assert_eq!(env.ciphertext.len(), payload.len());
        assert_eq!(env.wire_len(), payload.len() + 53);
        assert_eq!(open(&key(), &env).unwrap(), payload);
    }

    #[test]
    fn empty_payload_is_supported() {
        let env = seal(&key(), 0, 0, &[]).unwrap();
        assert_eq!(open(&key(), &env).unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn fresh_nonce_per_seal() {
        let a = seal(&key(), 1, 1, b"same").unwrap();
        let b = seal(&key(), 1, 1, b"same").unwrap();
        assert_ne!(a.nonce, b.nonce);
        assert_ne!(a.ciphertext, b.ciphertext);
    }

    #[test]
    fn wrong_key_fails() {
        let env = seal(&key(), 1, 1, b"payload").unwrap();
        let other = SecretKey::from_bytes([7u8; 16]);
        assert_eq!(open(&other, &env), Err(SecError::AuthFailure));
    }

    #[test]
    fn header_tampering_fails() {
        let mut env = seal(&key(), 5, 2, b"payload").unwrap();
        env.header.round = 6;
        assert_eq!(open(&key(), &env), Err(SecError::AuthFailure));
    }

    #[test]
    fn wire_roundtrip() {
        let env = seal(&key(), u64::MAX, 77, b"abc").unwrap();
        let bytes = env.to_bytes();
        assert_eq!(&bytes[..4], b"PFE1");
        assert_eq!(bytes[4], 1);
        assert_eq!(Envelope::from_bytes(&bytes).unwrap(), env);
        assert!(Envelope::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn keys_are_distinct_and_debug_is_redacted() {
        let a = keygen().unwrap();
        let b = keygen().unwrap();
        assert_ne!(a, b);
        assert_eq!(format!("{a:?}"), "SecretKey(..)");
    }

    #[test]
    fn replay_guard_rejects_stale_and_duplicate() {
        let mut g = ReplayGuard::new();
        let h1 = Header::new(1, 4, 0);
        g.check(&h1, 1).unwrap();
        assert!(g.check(&h1, 1).is_err());
        let h2 = Header::new(2, 4, 0);
        assert!(g.check(&h1, 2).is_err());
        g.check(&h2, 2).unwrap();
        assert_eq!(g.highest_round(4), Some(2));
        assert!(g.check(&Header::new(3, 5, 0), 2).is_err());
    }
}
