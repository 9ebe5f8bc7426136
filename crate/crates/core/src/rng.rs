//! Seeded random streams.
//!
//! Each stream is derived by hashing the run seed together with a key naming
//! what the randomness is for, so the samples a task sees never depend on
//! which worker runs it or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Identifies one independent random stream within a run.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub volume_id: String,
    /// Stable identifier of the augmented view (0 for the original view).
    pub augmentation: u64,
    /// Stable identifier of the ensemble member, when the stream drives a
    /// backend rather than an augmentation.
    pub member: Option<u64>,
}

impl StreamKey {
    pub fn augmentation(volume_id: impl Into<String>, augmentation: u64) -> Self {
        Self {
            volume_id: volume_id.into(),
            augmentation,
            member: None,
        }
    }

    pub fn with_member(mut self, member: u64) -> Self {
        self.member = Some(member);
        self
    }
}

/// Deterministic generator for one `(seed, stream key)` pair.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    key: StreamKey,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, key: StreamKey) -> Self {
        let mut h = Sha256::new();
        h.update(b"segtta-stream-v1");
        h.update(seed.to_le_bytes());
        h.update((key.volume_id.len() as u64).to_le_bytes());
        h.update(key.volume_id.as_bytes());
        h.update(key.augmentation.to_le_bytes());
        match key.member {
            Some(m) => {
                h.update([1u8]);
                h.update(m.to_le_bytes());
            }
            None => h.update([0u8]),
        }
        let digest: [u8; 32] = h.finalize().into();
        Self {
            seed,
            key,
            inner: ChaCha8Rng::from_seed(digest),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn key(&self) -> &StreamKey {
        &self.key
    }

    /// A fresh copy of this stream, rewound to its start.
    pub fn restarted(&self) -> Self {
        Self::new(self.seed, self.key.clone())
    }
}

impl rand::RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Stable 64-bit digest of a byte string, used to turn descriptors into
/// stream identifiers.
pub fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_key_same_sequence() {
        let mut a = SeededRng::new(2024, StreamKey::augmentation("case", 3));
        let mut b = SeededRng::new(2024, StreamKey::augmentation("case", 3));
        let xa: Vec<u64> = (0..16).map(|_| a.random()).collect();
        let xb: Vec<u64> = (0..16).map(|_| b.random()).collect();
        assert_eq!(xa, xb);
    }

    #[test]
    fn keys_separate_streams() {
        let first = |rng: &mut SeededRng| -> u64 { rng.random() };
        let base = first(&mut SeededRng::new(2024, StreamKey::augmentation("case", 3)));
        for other in [
            SeededRng::new(2025, StreamKey::augmentation("case", 3)),
            SeededRng::new(2024, StreamKey::augmentation("case2", 3)),
            SeededRng::new(2024, StreamKey::augmentation("case", 4)),
            SeededRng::new(2024, StreamKey::augmentation("case", 3).with_member(0)),
        ] {
            assert_ne!(first(&mut other.clone()), base);
        }
    }

    #[test]
    fn restart_rewinds() {
        let mut a = SeededRng::new(7, StreamKey::augmentation("v", 0));
        let x: u64 = a.random();
        let mut b = a.restarted();
        assert_eq!(b.random::<u64>(), x);
    }

    #[test]
    fn frozen_first_draw() {
        // Guards against silent changes to the derivation or the generator.
        let mut a = SeededRng::new(2024, StreamKey::augmentation("case", 0));
        let x: u64 = a.random();
        assert_eq!(x, 4258573365985296523);
        assert_eq!(
            stable_hash(&[b"abc"]),
            stable_hash(&[b"abc"]),
        );
        assert_ne!(stable_hash(&[b"ab", b"c"]), stable_hash(&[b"a", b"bc"]));
    }
}
