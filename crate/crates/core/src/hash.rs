//! Canonical hashing shared by block identity, seed chaining and nonce
//! commitments. Everything is SHA-256.

use std::fmt;

use sha2::{Digest, Sha256};

/// A 32-byte SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Hash(pub [u8; 32]);

impl Hash {
    pub const ZERO: Hash = Hash([0u8; 32]);

    pub fn digest(bytes: &[u8]) -> Hash {
        Hash(Sha256::digest(bytes).into())
    }

    /// Hash of several byte strings, each length-prefixed so that the
    /// concatenation is unambiguous.
    pub fn digest_parts(parts: &[&[u8]]) -> Hash {
        let mut h = Sha256::new();
        for p in parts {
            h.update((p.len() as u32).to_be_bytes());
            h.update(p);
        }
        Hash(h.finalize().into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Hash> {
        let bytes = hex::decode(s).ok()?;
        Some(Hash(bytes.try_into().ok()?))
    }

    /// First eight bytes as a big-endian integer.
    pub fn prefix_u64(&self) -> u64 {
        u64::from_be_bytes(self.0[..8].try_into().expect("32 >= 8"))
    }
}

impl fmt::Debug for Hash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Hash({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for Hash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Hash of a 64-bit value: `SHA-256(be64(x))` truncated to its first 8
/// bytes. Used for seed chaining and nonce commitments.
pub fn hash_u64(x: u64) -> u64 {
    Hash::digest(&x.to_be_bytes()).prefix_u64()
}

/// Commitment to a 64-bit acceptor nonce (full digest, not truncated).
pub fn commit_nonce(nonce: u64) -> Hash {
    Hash::digest_parts(&[b"nonce-commit", &nonce.to_be_bytes()])
}

/// Deterministic stream of 64-bit draws keyed by a seed:
/// draw `i` is `SHA-256(be64(seed) || be64(i))[..8]`.
#[derive(Debug, Clone)]
pub struct SeedStream {
    seed: u64,
    counter: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream { seed, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut buf = [0u8; 16];
        buf[..8].copy_from_slice(&self.seed.to_be_bytes());
        buf[8..].copy_from_slice(&self.counter.to_be_bytes());
        self.counter += 1;
        Hash::digest(&buf).prefix_u64()
    }

    /// Uniform integer in `0..bound` by rejection sampling.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "empty range");
        // Largest multiple of `bound` that fits; draws at or above it are rejected.
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % bound;
            }
        }
    }
}
