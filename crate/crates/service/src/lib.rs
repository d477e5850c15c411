//! Key delivery over HTTP in the style of ETSI GS QKD 014, backed by the
//! same key managers the simulator uses.
//!
//! Each process runs one key manager. Link messages travel to the peer as
//! framed batches on `POST /api/v1/kmlink`; a background task resends them
//! until the peer accepts, so the peer always applies them in order.

mod api;
mod config;
mod node;
mod wire;

pub use api::{router, serve, KeyContainer, KeyEntry, RawKey};
pub use config::ServiceConfig;
pub use node::{DigestReport, IngestSummary, Node, NodeError, NodeStatus};
pub use wire::{decode_batch, encode_batch};
