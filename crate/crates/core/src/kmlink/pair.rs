use thiserror::Error;

use super::manager::{KeyManager, KmEvent, KmSettings, SupplyRequest, SupplyStatus};
use super::message::KmMessage;
use super::{KmRole, LinkError};
use crate::ids::{stream_rng, IdGenerator, Stream};
use crate::keystore::{KeystoreError, ReplayError, SupplyError, SupplyKey};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PairError {
    #[error(transparent)]
    Supply(#[from] SupplyError),
    #[error("peer rejected the supply: {0}")]
    Rejected(ReplayError),
    #[error(transparent)]
    Link(#[from] LinkError),
}

/// Two key managers joined by an instantaneous in-memory link.
///
/// Used by tests and by tooling that needs mirrored stores without a clock.
#[derive(Debug)]
pub struct KmPair {
    pub master: KeyManager,
    pub slave: KeyManager,
    log: Option<Vec<(KmRole, KmMessage)>>,
}

impl KmPair {
    pub fn new(settings: KmSettings, seed: u64, run: u64) -> Result<Self, KeystoreError> {
        let master = KeyManager::new(
            KmRole::Master,
            settings.clone(),
            IdGenerator::new(stream_rng(seed, run, Stream::Master)),
        )?;
        let slave = KeyManager::new(
            KmRole::Slave,
            settings,
            IdGenerator::new(stream_rng(seed, run, Stream::Slave)),
        )?;
        Ok(Self {
            master,
            slave,
            log: None,
        })
    }

    /// Keeps every delivered message, tagged with its sender.
    pub fn record_messages(&mut self) {
        self.log.get_or_insert_with(Vec::new);
    }

    pub fn message_log(&self) -> &[(KmRole, KmMessage)] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn side(&mut self, role: KmRole) -> &mut KeyManager {
        match role {
            KmRole::Master => &mut self.master,
            KmRole::Slave => &mut self.slave,
        }
    }

    /// Both managers receive the same raw key, as from a QKD link.
    pub fn ingest(&mut self, raw: &[u8], stream: u64) -> Result<(), LinkError> {
        self.master.ingest(raw, stream)?;
        self.slave.ingest(raw, stream)?;
        Ok(())
    }

    /// Exchanges messages until both outboxes are empty. Returns the events
    /// raised on each side in the process.
    pub fn deliver_all(&mut self) -> Result<Vec<(KmRole, KmEvent)>, LinkError> {
        let mut events = Vec::new();
        loop {
            let to_slave = self.master.drain_outbox();
            let to_master = self.slave.drain_outbox();
            if to_slave.is_empty() && to_master.is_empty() {
                break;
            }
            for msg in to_slave {
                if let Some(log) = &mut self.log {
                    log.push((KmRole::Master, msg.clone()));
                }
                self.slave.receive(msg)?;
            }
            for msg in to_master {
                if let Some(log) = &mut self.log {
                    log.push((KmRole::Slave, msg.clone()));
                }
                self.master.receive(msg)?;
            }
            events.extend(self.master.drain_events().into_iter().map(|e| (KmRole::Master, e)));
            events.extend(self.slave.drain_events().into_iter().map(|e| (KmRole::Slave, e)));
        }
        events.extend(self.master.drain_events().into_iter().map(|e| (KmRole::Master, e)));
        events.extend(self.slave.drain_events().into_iter().map(|e| (KmRole::Slave, e)));
        Ok(events)
    }

    pub fn maintain(&mut self) -> Result<(), LinkError> {
        self.master.maintain();
        self.deliver_all().map(|_| ())
    }

    /// Supplies keys at `role`'s side and runs the synchronization to its
    /// end. Returns the keys the initiating application receives.
    pub fn sync_supply(&mut self, role: KmRole, req: &SupplyRequest) -> Result<Vec<SupplyKey>, PairError> {
        let supplied = self.side(role).supply(req)?;
        let events = self.deliver_all()?;
        match supplied.status {
            SupplyStatus::Delivered(keys) => Ok(keys),
            SupplyStatus::Pending { seq } => {
                for (side, event) in events {
                    if side != role {
                        continue;
                    }
                    match event {
                        KmEvent::Confirmed { seq: s, keys, .. } if s == seq => return Ok(keys),
                        KmEvent::Rejected { seq: s, reason, .. } if s == seq => {
                            return Err(PairError::Rejected(reason))
                        }
                        _ => {}
                    }
                }
                unreachable!("an instantaneous link always answers a supply")
            }
        }
    }

    pub fn digests_match(&self) -> bool {
        self.master.mirror_digest() == self.slave.mirror_digest()
    }
}
