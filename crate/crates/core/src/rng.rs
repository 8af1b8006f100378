//! Named random substreams.
//!
//! Every random draw in the crate comes from a ChaCha stream keyed by the root
//! seed, a stream name (`"init"`, `"sampling"`, `"shuffle"`, `"split"`, ...)
//! and any number of extra key parts such as an epoch or a video id. Keys are
//! hashed with SHA-256 so the derivation is stable across platforms and
//! independent of the order in which streams are requested.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// A single component of a substream key.
#[derive(Debug, Clone, Copy)]
pub enum KeyPart<'a> {
    Int(u64),
    Str(&'a str),
}

impl From<u64> for KeyPart<'_> {
    fn from(v: u64) -> Self {
        KeyPart::Int(v)
    }
}

impl From<usize> for KeyPart<'_> {
    fn from(v: usize) -> Self {
        KeyPart::Int(v as u64)
    }
}

impl<'a> From<&'a str> for KeyPart<'a> {
    fn from(v: &'a str) -> Self {
        KeyPart::Str(v)
    }
}

fn digest(seed: u64, stream: &str, parts: &[KeyPart<'_>]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((stream.len() as u64).to_le_bytes());
    hasher.update(stream.as_bytes());
    for part in parts {
        match part {
            KeyPart::Int(v) => {
                hasher.update([0u8]);
                hasher.update(v.to_le_bytes());
            }
            KeyPart::Str(s) => {
                hasher.update([1u8]);
                hasher.update((s.len() as u64).to_le_bytes());
                hasher.update(s.as_bytes());
            }
        }
    }
    hasher.finalize().into()
}

/// Stable 64-bit hash of a keyed stream.
pub fn stable_hash(seed: u64, stream: &str, parts: &[KeyPart<'_>]) -> u64 {
    let d = digest(seed, stream, parts);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Deterministic generator for the given substream.
pub fn substream(seed: u64, stream: &str, parts: &[KeyPart<'_>]) -> StreamRng {
    ChaCha8Rng::from_seed(digest(seed, stream, parts))
}
