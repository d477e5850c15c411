//! Deterministic discrete-event simulation of one QKD link, its two key
//! managers, and the applications drawing keys from them.

mod models;
mod sim;
mod time;
mod trace;

use thiserror::Error;

pub use models::{provision_key_rate, AppModel, Encryption, QkdLinkModel, AES_KEY_BITS};
pub use sim::{run, RetryMode, SimConfig};
pub use time::SimTime;
pub use trace::{Attempt, CollisionEvent, LevelSample, Outcome, RunCounters, RunTrace, TimingSample};

use crate::keystore::KeystoreError;
use crate::kmlink::LinkError;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error(transparent)]
    Keystore(#[from] KeystoreError),
    #[error(transparent)]
    Link(#[from] LinkError),
}

impl SimError {
    pub(crate) fn invalid(field: &str, reason: &str) -> Self {
        SimError::Invalid {
            field: field.to_string(),
            reason: reason.to_string(),
        }
    }
}
