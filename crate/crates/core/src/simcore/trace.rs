use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::time::SimTime;
use crate::ids::{AppId, KeyId};
use crate::keystore::Design;
use crate::kmlink::KmRole;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    Collision,
}

/// A GET_KEY that produced keys: either delivered cleanly or later found
/// to have collided.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub time: SimTime,
    pub side: KmRole,
    pub app: AppId,
    pub size_bits: u32,
    pub count: u32,
    /// Keys left in the local common store when the request was read.
    pub residual: u64,
    pub outcome: Outcome,
}

/// One key served by both key managers, counted once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub time: SimTime,
    pub key_id: KeyId,
    pub detected_by: KmRole,
    /// Residual count of the detecting side's colliding attempt.
    pub residual: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounters {
    pub packets_generated: u64,
    pub packets_sent: u64,
    pub requests: u64,
    pub successes: u64,
    /// Failed attempts, including hold-time polls skipped by coalescing.
    pub unavailable: u64,
    pub collisions: u64,
    pub rejects: u64,
    pub abandoned: u64,
    pub shortfalls: u64,
    pub requested_key_bytes: u64,
    pub generated_bytes: u64,
    pub waste_bytes: u64,
    pub overflow_keys: u64,
    pub deques_created: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSample {
    pub time: SimTime,
    pub common_keys: [u64; 2],
    pub pool_bytes: [[u64; 2]; 2],
}

/// CPU time of one successful supply-key creation. Host-dependent, so kept
/// out of the trace hash.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingSample {
    pub size_bits: u32,
    pub count: u32,
    pub nanos: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub seed: u64,
    pub run: u64,
    pub design: Design,
    pub default_key_size_bits: u32,
    pub app_count: usize,
    pub end_time: SimTime,
    pub attempts: Vec<Attempt>,
    pub collisions: Vec<CollisionEvent>,
    pub counters: RunCounters,
    pub levels: Vec<LevelSample>,
    /// Deques at the end of the run, both directions.
    pub deque_count: usize,
    /// Distinct requested key sizes on each side, summed over both sides.
    pub distinct_sizes: usize,
    /// Mirror digests of master and slave after the link went quiet.
    pub end_digests: [[u8; 32]; 2],
    /// Digest of the workload alone; equal across designs for one run.
    pub workload_hash: [u8; 32],
    /// Link messages as JSON lines, when requested.
    pub messages: Vec<String>,
    #[serde(skip)]
    pub timing: Vec<TimingSample>,
}

impl RunTrace {
    /// Digest of every deterministic part of the trace.
    pub fn trace_hash(&self) -> [u8; 32] {
        let bytes = bincode::serialize(self).expect("in-memory serialization cannot fail");
        Sha256::digest(bytes).into()
    }

    pub fn mirrored(&self) -> bool {
        self.end_digests[0] == self.end_digests[1]
    }
}
