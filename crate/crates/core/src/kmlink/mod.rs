//! The classical link between a master and a slave key manager.
//!
//! Both managers hold mirrored stores. Only the master moves keys out of the
//! common store (into purpose stores and deques); either side may build
//! supply keys from the stores it sends with, and the peer replays each
//! build from the record carried in a `SupplyCreate` message.

mod manager;
mod message;
mod pair;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use manager::{
    top_up_count, KeyManager, KmEvent, KmLevels, KmSettings, KmStats, Supplied, SupplyRequest,
    SupplyStatus, WaterMarks,
};
pub use message::{
    record_hash, KmMessage, KmPayload, MessageKind, QueueSupply, SupplyRecord, WireError,
    WIRE_VERSION,
};
pub use pair::{KmPair, PairError};

use crate::keystore::ReplayError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KmRole {
    Master,
    Slave,
}

impl KmRole {
    pub fn peer(self) -> KmRole {
        match self {
            KmRole::Master => KmRole::Slave,
            KmRole::Slave => KmRole::Master,
        }
    }
}

impl fmt::Display for KmRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KmRole::Master => "master",
            KmRole::Slave => "slave",
        })
    }
}

impl std::str::FromStr for KmRole {
    type Err = LinkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "master" => Ok(KmRole::Master),
            "slave" => Ok(KmRole::Slave),
            other => Err(LinkError::Config(format!("unknown role `{other}`"))),
        }
    }
}

/// Which way application traffic (and therefore encryption keys) flows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    MasterToSlave,
    SlaveToMaster,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::MasterToSlave, Direction::SlaveToMaster];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Direction of traffic sent by applications attached to `role`.
    pub fn sent_by(role: KmRole) -> Self {
        match role {
            KmRole::Master => Direction::MasterToSlave,
            KmRole::Slave => Direction::SlaveToMaster,
        }
    }

    pub fn sender(self) -> KmRole {
        match self {
            Direction::MasterToSlave => KmRole::Master,
            Direction::SlaveToMaster => KmRole::Slave,
        }
    }
}

/// Roles for nodes `a` and `b`: the lexicographically smaller id is master.
pub fn elect_master(a: &str, b: &str) -> Result<(KmRole, KmRole), LinkError> {
    match a.cmp(b) {
        std::cmp::Ordering::Less => Ok((KmRole::Master, KmRole::Slave)),
        std::cmp::Ordering::Greater => Ok((KmRole::Slave, KmRole::Master)),
        std::cmp::Ordering::Equal => Err(LinkError::Config(format!(
            "both key managers are named `{a}`"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinkError {
    #[error("link configuration: {0}")]
    Config(String),
    #[error("{role} cannot handle {kind:?}")]
    Protocol { role: KmRole, kind: MessageKind },
    #[error("mirrored stores diverged: {0}")]
    Desync(ReplayError),
    #[error(transparent)]
    Wire(#[from] WireError),
}
