//! Identifiers and the seeded random streams that produce them.
//!
//! Every random choice in a run (workload draws, key material, key ids,
//! supply UUIDs, uncoordinated key picks) comes from a ChaCha stream derived
//! from `(seed, run, stream tag)`, so two runs with equal inputs are
//! bit-identical.

use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

/// 128-bit identity of a stored key block.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct KeyId(pub u128);

impl KeyId {
    /// Id of block `index` cut from the raw key labelled `stream`.
    ///
    /// Both key managers of a pair receive the same raw key from the quantum
    /// layer and therefore derive the same block ids without talking.
    pub fn derived(stream: u64, index: u32) -> Self {
        KeyId(((stream as u128) << 64) | (1u128 << 63) | index as u128)
    }

    pub fn to_bytes(self) -> [u8; 16] {
        self.0.to_be_bytes()
    }
}

impl fmt::Debug for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyId({:032x})", self.0)
    }
}

impl fmt::Display for KeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

/// Application identifier, unique within a run or a service instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AppId(pub u32);

impl fmt::Display for AppId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "app-{}", self.0)
    }
}

/// Tags separating the independent random streams of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Workload = 1,
    KeyMaterial = 2,
    Master = 3,
    Slave = 4,
    Bench = 5,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of stream `stream` for `(seed, run)`.
pub fn stream_seed(seed: u64, run: u64, stream: Stream) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ run) ^ stream as u64)
}

pub fn stream_rng(seed: u64, run: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, run, stream))
}

/// Source of fresh key ids and RFC-4122 version-4 UUIDs for one key manager.
#[derive(Debug, Clone)]
pub struct IdGenerator {
    rng: ChaCha8Rng,
}

impl IdGenerator {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self { rng }
    }

    pub fn from_seed(seed: u64) -> Self {
        Self::new(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Seeded from operating-system entropy; used by the network service.
    pub fn from_entropy() -> Self {
        Self::new(ChaCha8Rng::from_entropy())
    }

    pub fn next_key_id(&mut self) -> KeyId {
        // Random ids keep bit 63 clear so they never alias a derived id.
        KeyId(self.rng.gen::<u128>() & !(1u128 << 63))
    }

    pub fn next_uuid(&mut self) -> Uuid {
        let mut bytes = [0u8; 16];
        self.rng.fill_bytes(&mut bytes);
        uuid::Builder::from_random_bytes(bytes).into_uuid()
    }

    pub fn below(&mut self, bound: usize) -> usize {
        self.rng.gen_range(0..bound)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uuids_are_version_4() {
        let mut ids = IdGenerator::from_seed(7);
        for _ in 0..16 {
            let u = ids.next_uuid();
            assert_eq!(u.get_version_num(), 4);
            assert_eq!(u.get_variant(), uuid::Variant::RFC4122);
        }
    }

    #[test]
    fn equal_seeds_give_equal_sequences() {
        let mut a = IdGenerator::new(stream_rng(100, 3, Stream::Master));
        let mut b = IdGenerator::new(stream_rng(100, 3, Stream::Master));
        for _ in 0..8 {
            assert_eq!(a.next_uuid(), b.next_uuid());
            assert_eq!(a.next_key_id(), b.next_key_id());
        }
        let mut c = IdGenerator::new(stream_rng(100, 4, Stream::Master));
        assert_ne!(a.next_uuid(), c.next_uuid());
    }

    #[test]
    fn derived_and_random_ids_do_not_alias() {
        let mut ids = IdGenerator::from_seed(1);
        let derived = KeyId::derived(5, 9);
        assert_ne!(derived.0 & (1 << 63), 0);
        for _ in 0..64 {
            assert_eq!(ids.next_key_id().0 & (1 << 63), 0);
        }
    }
}
