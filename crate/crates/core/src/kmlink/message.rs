use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use uuid::Uuid;

use super::Direction;
use crate::ids::KeyId;
use crate::keystore::{DequeSupplyRecord, FillReport, ReplayError, SeqRange, TransformRecord};

/// Leading byte of every encoded message.
pub const WIRE_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueSupply {
    pub uuid: Uuid,
    pub range: SeqRange,
}

/// How the initiator built a batch of supply keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SupplyRecord {
    Hash(Vec<TransformRecord>),
    Queue(Vec<QueueSupply>),
    Deque(Vec<DequeSupplyRecord>),
}

impl SupplyRecord {
    pub fn uuids(&self) -> Vec<Uuid> {
        match self {
            SupplyRecord::Hash(r) => r.iter().map(|t| t.uuid).collect(),
            SupplyRecord::Queue(r) => r.iter().map(|q| q.uuid).collect(),
            SupplyRecord::Deque(r) => r.iter().map(|d| d.uuid).collect(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SupplyRecord::Hash(r) => r.len(),
            SupplyRecord::Queue(r) => r.len(),
            SupplyRecord::Deque(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum KmPayload {
    /// Master moved these common-store keys, in order, to a purpose store.
    AssignPurpose {
        direction: Direction,
        key_ids: Vec<KeyId>,
    },
    /// From the master: a deque now exists. From the slave: please create one.
    CreateDeque {
        direction: Direction,
        deque_id: Option<Uuid>,
        element_size_bits: u32,
    },
    FillDeque {
        direction: Direction,
        fill: FillReport,
    },
    SupplyCreate {
        direction: Direction,
        record: SupplyRecord,
    },
    Confirm {
        supply_seq: u64,
        record_hash: [u8; 32],
    },
    Reject {
        supply_seq: u64,
        reason: ReplayError,
    },
    /// Single-common design: keys served locally without coordination.
    ReserveNotice { served: Vec<(KeyId, Uuid)> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    AssignPurpose,
    CreateDeque,
    FillDeque,
    SupplyCreate,
    Confirm,
    Reject,
    ReserveNotice,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KmMessage {
    /// Per-direction counter starting at 0, without gaps.
    pub msg_seq: u64,
    pub payload: KmPayload,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("empty message")]
    Empty,
    #[error("unsupported wire version {0}")]
    Version(u8),
    #[error("undecodable message: {0}")]
    Decode(String),
}

impl KmMessage {
    pub fn kind(&self) -> MessageKind {
        match self.payload {
            KmPayload::AssignPurpose { .. } => MessageKind::AssignPurpose,
            KmPayload::CreateDeque { .. } => MessageKind::CreateDeque,
            KmPayload::FillDeque { .. } => MessageKind::FillDeque,
            KmPayload::SupplyCreate { .. } => MessageKind::SupplyCreate,
            KmPayload::Confirm { .. } => MessageKind::Confirm,
            KmPayload::Reject { .. } => MessageKind::Reject,
            KmPayload::ReserveNotice { .. } => MessageKind::ReserveNotice,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![WIRE_VERSION];
        bincode::serialize_into(&mut out, self).expect("in-memory serialization cannot fail");
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let (&version, body) = bytes.split_first().ok_or(WireError::Empty)?;
        if version != WIRE_VERSION {
            return Err(WireError::Version(version));
        }
        bincode::deserialize(body).map_err(|e| WireError::Decode(e.to_string()))
    }

    /// One-line JSON rendering for trace dumps.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("message is always representable as JSON")
    }
}

/// Digest a responder returns in `Confirm` so the initiator can check that
/// both sides executed the same record.
pub fn record_hash(record: &SupplyRecord) -> [u8; 32] {
    let bytes = bincode::serialize(record).expect("in-memory serialization cannot fail");
    Sha256::digest(bytes).into()
}
