use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use thiserror::Error;
use tokio::sync::{oneshot, Notify};
use tokio::time::Instant;
use uuid::Uuid;

use keylab_core::ids::{stream_rng, AppId, IdGenerator, Stream};
use keylab_core::keystore::{Design, ReplayError, SupplyError, SupplyKey};
use keylab_core::kmlink::{KeyManager, KmEvent, KmMessage, KmRole, LinkError, SupplyRequest, SupplyStatus};

use crate::config::ServiceConfig;
use crate::wire::{decode_batch, encode_batch};

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("{0}")]
    BadRequest(String),
    #[error("unknown SAE `{0}`")]
    UnknownSae(String),
    #[error("no key with id {0}")]
    UnknownKey(Uuid),
    #[error("not enough key material")]
    Unavailable,
    #[error("peer rejected the supply: {0}")]
    Rejected(ReplayError),
    #[error("peer did not confirm the supply in time")]
    PeerTimeout,
    #[error(transparent)]
    Link(#[from] LinkError),
}

type Waiter = oneshot::Sender<Result<Vec<SupplyKey>, ReplayError>>;

struct State {
    km: KeyManager,
    /// Sent messages stay here until the peer has accepted them.
    outgoing: VecDeque<KmMessage>,
    waiters: HashMap<u64, Waiter>,
}

impl State {
    /// Lets the master restore its stores, hands finished supplies to their
    /// waiters and queues new link messages.
    fn settle(&mut self) {
        if self.km.role() == KmRole::Master {
            self.km.maintain();
        }
        for event in self.km.drain_events() {
            match event {
                KmEvent::Confirmed { seq, keys, .. } => {
                    if let Some(w) = self.waiters.remove(&seq) {
                        let _ = w.send(Ok(keys));
                    }
                }
                KmEvent::Rejected { seq, reason, .. } => {
                    if let Some(w) = self.waiters.remove(&seq) {
                        let _ = w.send(Err(reason));
                    }
                }
                KmEvent::Collision { key_id, .. } => tracing::warn!(%key_id, "key access collision"),
                _ => {}
            }
        }
        self.outgoing.extend(self.km.drain_outbox());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct IngestSummary {
    pub inserted: usize,
    pub dropped: usize,
    pub waste_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct NodeStatus {
    pub stored_key_count: usize,
    pub default_key_size_bits: usize,
    pub max_key_per_request: usize,
    pub design: Design,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct DigestReport {
    pub role: KmRole,
    pub digest: String,
    /// Link messages not yet accepted by the peer.
    pub outgoing: usize,
    /// Own supplies awaiting the peer's answer.
    pub pending: usize,
    /// Peer messages waiting for key material.
    pub deferred: usize,
    pub deques: usize,
}

impl DigestReport {
    pub fn quiescent(&self) -> bool {
        self.outgoing == 0 && self.pending == 0 && self.deferred == 0
    }
}

/// One key manager behind the HTTP interface, with a background task that
/// pushes its link messages to the peer in order.
pub struct Node {
    config: ServiceConfig,
    state: Mutex<State>,
    /// Serializes key requests end to end.
    turn: tokio::sync::Mutex<()>,
    wake: Notify,
    client: reqwest::Client,
}

const RETRY_PAUSE: Duration = Duration::from_millis(50);
const DEQUE_POLL: Duration = Duration::from_millis(2);

impl Node {
    /// Creates the node and, when a peer is configured, its link task.
    /// Must be called inside a Tokio runtime.
    pub fn start(config: ServiceConfig) -> Result<Arc<Self>, NodeError> {
        let ids = match config.seed {
            Some(seed) => {
                let stream = match config.role {
                    KmRole::Master => Stream::Master,
                    KmRole::Slave => Stream::Slave,
                };
                IdGenerator::new(stream_rng(seed, 0, stream))
            }
            None => IdGenerator::from_entropy(),
        };
        let km = KeyManager::new(config.role, config.settings.clone(), ids)
            .map_err(|e| NodeError::BadRequest(e.to_string()))?;
        let has_peer = config.peer.is_some();
        let node = Arc::new(Self {
            config,
            state: Mutex::new(State {
                km,
                outgoing: VecDeque::new(),
                waiters: HashMap::new(),
            }),
            turn: tokio::sync::Mutex::new(()),
            wake: Notify::new(),
            client: reqwest::Client::new(),
        });
        if has_peer {
            tokio::spawn(link_task(node.clone()));
        }
        Ok(node)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn check_peer_sae(&self, sae: &str) -> Result<(), NodeError> {
        if sae != self.config.peer_sae_id {
            return Err(NodeError::UnknownSae(sae.to_string()));
        }
        Ok(())
    }

    /// Sends queued messages once. Returns whether anything was sent.
    async fn push_outgoing(&self, url: &str) -> Result<bool, String> {
        let batch: Vec<KmMessage> = self.lock().outgoing.iter().cloned().collect();
        let Some(last) = batch.last().map(|m| m.msg_seq) else {
            return Ok(false);
        };
        let resp = self
            .client
            .post(url)
            .header("content-type", "application/octet-stream")
            .body(encode_batch(&batch))
            .send()
            .await
            .map_err(|e| e.to_string())?;
        if !resp.status().is_success() {
            return Err(format!("peer answered {}", resp.status()));
        }
        let mut st = self.lock();
        while st.outgoing.front().is_some_and(|m| m.msg_seq <= last) {
            st.outgoing.pop_front();
        }
        Ok(true)
    }

    /// Applies a batch of peer messages.
    pub fn receive(&self, body: &[u8]) -> Result<(), NodeError> {
        let msgs = decode_batch(body).map_err(LinkError::from)?;
        let mut st = self.lock();
        for m in msgs {
            st.km.receive(m)?;
        }
        st.settle();
        drop(st);
        self.wake.notify_one();
        Ok(())
    }

    /// Stores a raw key delivered by the quantum layer. Both nodes must get
    /// the same key under the same stream number.
    pub fn ingest(&self, stream: u64, raw: &[u8]) -> Result<IngestSummary, NodeError> {
        let mut st = self.lock();
        let report = st.km.ingest(raw, stream)?;
        st.settle();
        drop(st);
        self.wake.notify_one();
        Ok(IngestSummary {
            inserted: report.inserted.len(),
            dropped: report.dropped_keys,
            waste_bytes: report.waste_bytes,
        })
    }

    /// Produces `number` keys of `size_bits` for the peer SAE `slave_sae`,
    /// returning once the peer has confirmed them.
    pub async fn enc_keys(&self, slave_sae: &str, number: usize, size_bits: u32) -> Result<Vec<SupplyKey>, NodeError> {
        self.check_peer_sae(slave_sae)?;
        if number == 0 || number > self.config.max_key_per_request {
            return Err(NodeError::BadRequest(format!(
                "number must lie in 1..={}",
                self.config.max_key_per_request
            )));
        }
        if size_bits == 0 || size_bits % 8 != 0 {
            return Err(NodeError::BadRequest("size must be a positive multiple of 8".into()));
        }
        if size_bits as usize > self.config.settings.working_set_bytes * 8 {
            return Err(NodeError::BadRequest(format!(
                "size exceeds the {}-bit maximum",
                self.config.settings.working_set_bytes * 8
            )));
        }
        let _turn = self.turn.lock().await;
        let req = SupplyRequest {
            app: AppId(0),
            size_bits,
            count: number,
        };
        let deadline = Instant::now() + self.config.confirm_timeout;
        loop {
            let waiting = {
                let mut st = self.lock();
                let attempt = st.km.supply(&req);
                let out = match attempt {
                    Ok(s) => match s.status {
                        SupplyStatus::Delivered(keys) => Ok(Some(Ok(keys))),
                        SupplyStatus::Pending { seq } => {
                            let (tx, rx) = oneshot::channel();
                            st.waiters.insert(seq, tx);
                            Ok(Some(Err((seq, rx))))
                        }
                    },
                    Err(SupplyError::NoDeque { .. }) => Ok(None),
                    Err(SupplyError::Unavailable) => Err(NodeError::Unavailable),
                    Err(SupplyError::Invalid(e)) => Err(NodeError::BadRequest(e.to_string())),
                };
                st.settle();
                out
            };
            self.wake.notify_one();
            match waiting? {
                Some(Ok(keys)) => return Ok(keys),
                Some(Err((seq, rx))) => return self.await_confirm(seq, rx, deadline).await,
                None => {
                    // The master is creating a deque for this size.
                    if Instant::now() >= deadline {
                        return Err(NodeError::Unavailable);
                    }
                    tokio::time::sleep(DEQUE_POLL).await;
                }
            }
        }
    }

    async fn await_confirm(
        &self,
        seq: u64,
        rx: oneshot::Receiver<Result<Vec<SupplyKey>, ReplayError>>,
        deadline: Instant,
    ) -> Result<Vec<SupplyKey>, NodeError> {
        match tokio::time::timeout_at(deadline, rx).await {
            Ok(Ok(Ok(keys))) => Ok(keys),
            Ok(Ok(Err(reason))) => Err(NodeError::Rejected(reason)),
            Ok(Err(_)) | Err(_) => {
                let mut st = self.lock();
                st.waiters.remove(&seq);
                st.km.expire(seq);
                Err(NodeError::PeerTimeout)
            }
        }
    }

    /// Hands out, once, a key the peer supplied to its SAE `master_sae`.
    pub fn dec_key(&self, master_sae: &str, uuid: &Uuid) -> Result<SupplyKey, NodeError> {
        self.check_peer_sae(master_sae)?;
        self.lock().km.take_deliverable(uuid).ok_or(NodeError::UnknownKey(*uuid))
    }

    pub fn status(&self, sae: &str) -> Result<NodeStatus, NodeError> {
        self.check_peer_sae(sae)?;
        let st = self.lock();
        let d = self.config.settings.default_key_size_bytes;
        Ok(NodeStatus {
            stored_key_count: st.km.stored_bytes() / d,
            default_key_size_bits: d * 8,
            max_key_per_request: self.config.max_key_per_request,
            design: self.config.settings.design,
        })
    }

    pub fn digest(&self) -> DigestReport {
        let st = self.lock();
        DigestReport {
            role: self.config.role,
            digest: hex::encode(st.km.mirror_digest()),
            outgoing: st.outgoing.len(),
            pending: st.km.pending_count(),
            deferred: st.km.deferred_count(),
            deques: st.km.deque_count(),
        }
    }
}

async fn link_task(node: Arc<Node>) {
    let url = format!("{}/api/v1/kmlink", node.config.peer.as_deref().expect("peer configured"));
    let mut failing = false;
    loop {
        match node.push_outgoing(&url).await {
            Ok(true) => failing = false,
            Ok(false) => {
                failing = false;
                node.wake.notified().await;
            }
            Err(e) => {
                if !failing {
                    tracing::warn!(peer = %url, error = %e, "link delivery failed, retrying");
                }
                failing = true;
                tokio::time::sleep(RETRY_PAUSE).await;
            }
        }
    }
}
