//! Pluggable hash and signature primitives.
//!
//! `Sha256Hash` + `Ed25519` are the real, collision-resistant pair used by
//! integrity checks; `FastHash` + `ToySigner` are cheap test doubles that
//! keep large simulations quick. The doubles offer no security at all.

use std::sync::Arc;

use ed25519_dalek::{Signer as _, SigningKey, VerifyingKey};
use sha2::{Digest as _, Sha256};

pub type Digest = [u8; 32];

pub trait HashFn: Send + Sync {
    fn digest(&self, data: &[u8]) -> Digest;
}

pub trait SignatureScheme: Send + Sync {
    fn keypair(&self, seed: u64) -> KeyPair;
    fn sign(&self, secret: &[u8], msg: &[u8]) -> Vec<u8>;
    fn verify(&self, public: &[u8], msg: &[u8], sig: &[u8]) -> bool;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyPair {
    pub public: Vec<u8>,
    pub secret: Vec<u8>,
}

pub struct Sha256Hash;

impl HashFn for Sha256Hash {
    fn digest(&self, data: &[u8]) -> Digest {
        Sha256::digest(data).into()
    }
}

/// Four independent FNV-1a lanes.
pub struct FastHash;

impl HashFn for FastHash {
    fn digest(&self, data: &[u8]) -> Digest {
        let mut out = [0u8; 32];
        for lane in 0..4u64 {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ lane.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            for &b in data {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            out[lane as usize * 8..][..8].copy_from_slice(&h.to_le_bytes());
        }
        out
    }
}

pub struct Ed25519;

impl SignatureScheme for Ed25519 {
    fn keypair(&self, seed: u64) -> KeyPair {
        let material = Sha256::digest(seed.to_le_bytes());
        let key = SigningKey::from_bytes(&material.into());
        KeyPair {
            public: key.verifying_key().to_bytes().to_vec(),
            secret: key.to_bytes().to_vec(),
        }
    }

    fn sign(&self, secret: &[u8], msg: &[u8]) -> Vec<u8> {
        let bytes: [u8; 32] = secret.try_into().expect("ed25519 secret is 32 bytes");
        SigningKey::from_bytes(&bytes).sign(msg).to_bytes().to_vec()
    }

    fn verify(&self, public: &[u8], msg: &[u8], sig: &[u8]) -> bool {
        let (Ok(pk), Ok(sig)) = (<[u8; 32]>::try_from(public), <[u8; 64]>::try_from(sig)) else {
            return false;
        };
        let Ok(vk) = VerifyingKey::from_bytes(&pk) else {
            return false;
        };
        vk.verify_strict(msg, &ed25519_dalek::Signature::from_bytes(&sig)).is_ok()
    }
}

/// Keyed-hash stand-in: the public key doubles as the secret.
pub struct ToySigner;

impl SignatureScheme for ToySigner {
    fn keypair(&self, seed: u64) -> KeyPair {
        let key = FastHash.digest(&seed.to_le_bytes())[..16].to_vec();
        KeyPair {
            public: key.clone(),
            secret: key,
        }
    }

    fn sign(&self, secret: &[u8], msg: &[u8]) -> Vec<u8> {
        let mut buf = Vec::with_capacity(secret.len() + msg.len());
        buf.extend_from_slice(secret);
        buf.extend_from_slice(msg);
        FastHash.digest(&buf)[..16].to_vec()
    }

    fn verify(&self, public: &[u8], msg: &[u8], sig: &[u8]) -> bool {
        self.sign(public, msg) == sig
    }
}

/// A hash function and a signature scheme used together.
#[derive(Clone)]
pub struct Crypto {
    pub hash: Arc<dyn HashFn>,
    pub sig: Arc<dyn SignatureScheme>,
}

impl Crypto {
    pub fn real() -> Self {
        Crypto {
            hash: Arc::new(Sha256Hash),
            sig: Arc::new(Ed25519),
        }
    }

    pub fn fast() -> Self {
        Crypto {
            hash: Arc::new(FastHash),
            sig: Arc::new(ToySigner),
        }
    }

    pub fn digest(&self, data: &[u8]) -> Digest {
        self.hash.digest(data)
    }
}

impl std::fmt::Debug for Crypto {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Crypto")
    }
}

pub fn to_hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            to_hex(&Sha256Hash.digest(b"abc")),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn signatures_verify_and_reject_forgeries() {
        for scheme in [&Ed25519 as &dyn SignatureScheme, &ToySigner] {
            let kp = scheme.keypair(11);
            let sig = scheme.sign(&kp.secret, b"status");
            assert!(scheme.verify(&kp.public, b"status", &sig));
            assert!(!scheme.verify(&kp.public, b"statuS", &sig));
            let mut bad = sig.clone();
            bad[3] ^= 0x10;
            assert!(!scheme.verify(&kp.public, b"status", &bad));
            let other = scheme.keypair(12);
            assert!(!scheme.verify(&other.public, b"status", &sig));
        }
    }
}
