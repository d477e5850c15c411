//! Key storage designs.
//!
//! Four designs share one supply contract:
//!
//! * [`Design::SingleCommon`]: applications are served straight from the
//!   common store with no coordination between the two key managers.
//! * [`Design::EncDecHash`]: the master assigns common-store keys to
//!   encryption/decryption hash stores; supply merges and splits them.
//! * [`Design::ByteQueue`]: purpose stores hold a FIFO of single bytes, each
//!   carrying a sequential identifier.
//! * [`Design::AppSharedDeque`]: purpose stores feed deques of pre-formatted
//!   keys shared by applications whose request size is a multiple of the
//!   deque element size.

mod bytequeue;
mod common;
mod deque;
mod purpose;
mod table;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::ids::KeyId;

pub use bytequeue::{ByteQueueStore, QueuedByte, SeqRange};
pub use common::{CommonStore, IngestReport, IngestStats};
pub use deque::{DequeRegistry, DequeSelection, DequeStore, DequeSupplyRecord, FillReport};
pub use purpose::{HashSupply, PurposeStore, SourceRef, TransformRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyState {
    Available,
    Reserved,
    Served,
}

/// A block of key material with identity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredKey {
    pub id: KeyId,
    pub material: Vec<u8>,
    pub state: KeyState,
}

impl StoredKey {
    pub fn available(id: KeyId, material: Vec<u8>) -> Self {
        Self {
            id,
            material,
            state: KeyState::Available,
        }
    }

    pub fn size_bytes(&self) -> usize {
        self.material.len()
    }
}

/// A key of an application-requested size, labelled with a UUID.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupplyKey {
    pub uuid: Uuid,
    pub material: Vec<u8>,
}

impl SupplyKey {
    pub fn size_bits(&self) -> usize {
        self.material.len() * 8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Purpose {
    Encryption,
    Decryption,
}

/// Storage design selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Design {
    #[serde(rename = "single")]
    SingleCommon,
    #[serde(rename = "hash")]
    EncDecHash,
    #[serde(rename = "queue")]
    ByteQueue,
    #[serde(rename = "deque")]
    AppSharedDeque,
}

impl Design {
    pub const ALL: [Design; 4] = [
        Design::SingleCommon,
        Design::EncDecHash,
        Design::ByteQueue,
        Design::AppSharedDeque,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Design::SingleCommon => "single",
            Design::EncDecHash => "hash",
            Design::ByteQueue => "queue",
            Design::AppSharedDeque => "deque",
        }
    }

    /// Whether two key managers can hand the same key to different applications.
    pub fn can_collide(self) -> bool {
        self == Design::SingleCommon
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown storage design `{0}` (expected single, hash, queue or deque)")]
pub struct UnknownDesign(pub String);

impl FromStr for Design {
    type Err = UnknownDesign;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "single" | "single-common" | "singlecommon" => Ok(Design::SingleCommon),
            "hash" | "encdec" | "encdec-hash" | "encdechash" => Ok(Design::EncDecHash),
            "queue" | "bytequeue" | "byte-queue" => Ok(Design::ByteQueue),
            "deque" | "app-shared-deque" | "appshareddeque" => Ok(Design::AppSharedDeque),
            _ => Err(UnknownDesign(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeystoreError {
    #[error("default key size must be positive")]
    ZeroKeySize,
    #[error("store capacity must be positive")]
    ZeroCapacity,
    #[error("raw key is empty")]
    EmptyRawKey,
    #[error("requested size of {0} bits is not a positive multiple of 8")]
    BadSize(u32),
    #[error("requested size of {requested} bits is not served by this store (fixed {fixed} bits)")]
    FixedSize { requested: u32, fixed: u32 },
    #[error("request of {requested} bits is not a multiple of deque element size {element} bits")]
    NotDivisible { requested: u32, element: u32 },
}

/// Why a supply request produced no keys.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SupplyError {
    #[error("not enough key material")]
    Unavailable,
    #[error("no deque can serve {size_bits}-bit keys yet")]
    NoDeque { size_bits: u32 },
    #[error(transparent)]
    Invalid(#[from] KeystoreError),
}

/// Why a replayed operation could not be mirrored on the responder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
pub enum ReplayError {
    #[error("key {0} is not available")]
    MissingKey(KeyId),
    #[error("key {id} has {actual} bytes, expected {expected}")]
    SizeMismatch {
        id: KeyId,
        expected: usize,
        actual: usize,
    },
    #[error("byte queue head is at {actual:?}, record starts at {expected}")]
    SeqMismatch { expected: u64, actual: Option<u64> },
    #[error("unknown deque {0}")]
    UnknownDeque(Uuid),
    #[error("deque front does not match the record")]
    DequeFront,
    #[error("record is inconsistent: {0}")]
    Malformed(String),
}

pub(crate) fn check_size_bits(size_bits: u32) -> Result<usize, KeystoreError> {
    if size_bits == 0 || size_bits % 8 != 0 {
        return Err(KeystoreError::BadSize(size_bits));
    }
    Ok(size_bits as usize / 8)
}
