use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uuid::Uuid;

use super::message::{record_hash, KmMessage, KmPayload, QueueSupply, SupplyRecord};
use super::{Direction, KmRole, LinkError};
use crate::ids::{AppId, IdGenerator, KeyId};
use crate::keystore::{
    ByteQueueStore, CommonStore, DequeRegistry, DequeSelection, Design, IngestReport,
    KeystoreError, Purpose, PurposeStore, ReplayError, StoredKey, SupplyError, SupplyKey,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmSettings {
    pub design: Design,
    pub default_key_size_bytes: usize,
    pub capacity_keys: usize,
    /// High-water mark of each purpose store and deque, in bytes.
    pub working_set_bytes: usize,
    /// Low-water mark as a fraction of the high-water mark.
    pub low_water_fraction: f64,
    /// Keep replayed supply keys so the receiving application can fetch them.
    pub retain_deliverables: bool,
}

impl KmSettings {
    pub fn new(design: Design, default_key_size_bytes: usize) -> Self {
        Self {
            design,
            default_key_size_bytes,
            capacity_keys: 100_000,
            working_set_bytes: 16_384,
            low_water_fraction: 0.25,
            retain_deliverables: true,
        }
    }

    /// Water marks for a store whose unit is `unit_bytes` large.
    pub fn water_marks(&self, unit_bytes: usize) -> WaterMarks {
        let high = (self.working_set_bytes / unit_bytes.max(1)).max(1);
        let low = ((high as f64 * self.low_water_fraction).ceil() as usize).clamp(1, high);
        WaterMarks { low, high }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WaterMarks {
    pub low: usize,
    pub high: usize,
}

/// Units to move so a store at `level` returns to its high mark, bounded by
/// what is `available`, plus whether the source fell short.
pub fn top_up_count(level: usize, marks: WaterMarks, available: usize) -> (usize, bool) {
    if level >= marks.low {
        return (0, false);
    }
    let want = marks.high - level;
    (want.min(available), available < want)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SupplyRequest {
    pub app: AppId,
    pub size_bits: u32,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SupplyStatus {
    /// Single-common design: keys go to the application at once.
    Delivered(Vec<SupplyKey>),
    /// Keys are held until the peer confirms the `SupplyCreate` with this seq.
    Pending { seq: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Supplied {
    /// Time spent interpreting the request and building keys and UUIDs.
    pub created_in: Duration,
    pub status: SupplyStatus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KmEvent {
    Confirmed {
        seq: u64,
        app: AppId,
        keys: Vec<SupplyKey>,
    },
    Rejected {
        seq: u64,
        app: AppId,
        reason: ReplayError,
    },
    /// A peer reservation named a key this side had already served.
    Collision {
        key_id: KeyId,
        local_uuid: Uuid,
        remote_uuid: Uuid,
    },
    /// This side replayed a peer supply; the keys await the receiving application.
    Replayed { uuids: Vec<Uuid> },
    DequeCreated {
        direction: Direction,
        deque_id: Uuid,
        element_size_bits: u32,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KmStats {
    pub shortfalls: u64,
    pub rejects_sent: u64,
    pub rejects_received: u64,
    pub collisions: u64,
    pub abandoned: u64,
    pub deferred_messages: u64,
}

/// Snapshot of store fill levels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KmLevels {
    pub common_keys: usize,
    pub pool_bytes: [usize; 2],
    pub deques: usize,
}

#[derive(Debug, Clone)]
enum Pool {
    None,
    Hash(PurposeStore),
    Queue(ByteQueueStore),
    Deque {
        source: PurposeStore,
        registry: DequeRegistry,
    },
}

impl Pool {
    fn new(design: Design, purpose: Purpose, default_key_size: usize) -> Self {
        match design {
            Design::SingleCommon => Pool::None,
            Design::EncDecHash => Pool::Hash(PurposeStore::new(purpose, default_key_size)),
            Design::ByteQueue => Pool::Queue(ByteQueueStore::new(purpose, 0)),
            Design::AppSharedDeque => Pool::Deque {
                source: PurposeStore::new(purpose, default_key_size),
                registry: DequeRegistry::default(),
            },
        }
    }

    fn bytes(&self) -> usize {
        match self {
            Pool::None => 0,
            Pool::Hash(s) => s.bytes(),
            Pool::Queue(q) => q.len(),
            Pool::Deque { source, registry } => source.bytes() + registry.bytes(),
        }
    }

    fn assign(&mut self, keys: Vec<StoredKey>) -> Result<(), ReplayError> {
        match self {
            Pool::None => Err(ReplayError::Malformed("design has no purpose stores".into())),
            Pool::Hash(s) | Pool::Deque { source: s, .. } => s.assign(keys),
            Pool::Queue(q) => {
                for key in keys {
                    q.push(&key.material);
                }
                Ok(())
            }
        }
    }

    fn digest_into(&self, h: &mut Sha256) {
        match self {
            Pool::None => {}
            Pool::Hash(s) => s.digest_into(h),
            Pool::Queue(q) => q.digest_into(h),
            Pool::Deque { source, registry } => {
                source.digest_into(h);
                registry.digest_into(h);
            }
        }
    }

    /// Undoes the local build of `record`; `keys` are the keys built from it.
    fn rollback(&mut self, record: &SupplyRecord, keys: Vec<SupplyKey>) {
        match (self, record) {
            (Pool::Hash(s), SupplyRecord::Hash(recs)) => {
                for (rec, key) in recs.iter().zip(keys).rev() {
                    s.rollback(rec, key.material);
                }
            }
            (Pool::Queue(q), SupplyRecord::Queue(recs)) => {
                for (rec, key) in recs.iter().zip(keys).rev() {
                    q.restore_front(rec.range.first, &key.material);
                }
            }
            (Pool::Deque { registry, .. }, SupplyRecord::Deque(recs)) => {
                for (rec, key) in recs.iter().zip(keys).rev() {
                    if let Some(d) = registry.get_mut(&rec.deque_id) {
                        d.restore_front(rec, &key.material);
                    }
                }
            }
            _ => {}
        }
    }

    /// Rebuilds the keys of a peer supply, all or nothing.
    fn replay(&mut self, record: &SupplyRecord) -> Result<Vec<SupplyKey>, ReplayError> {
        let mut done = Vec::with_capacity(record.len());
        let result = match (&mut *self, record) {
            (Pool::Hash(s), SupplyRecord::Hash(recs)) => recs.iter().try_for_each(|r| {
                done.push(s.replay(r)?);
                Ok(())
            }),
            (Pool::Queue(q), SupplyRecord::Queue(recs)) => recs.iter().try_for_each(|r| {
                let material = q.replay(r.range)?;
                done.push(SupplyKey {
                    uuid: r.uuid,
                    material,
                });
                Ok(())
            }),
            (Pool::Deque { registry, .. }, SupplyRecord::Deque(recs)) => {
                recs.iter().try_for_each(|r| {
                    let d = registry
                        .get_mut(&r.deque_id)
                        .ok_or(ReplayError::UnknownDeque(r.deque_id))?;
                    done.push(d.replay_supply(r)?);
                    Ok(())
                })
            }
            _ => Err(ReplayError::Malformed("record does not match this design".into())),
        };
        match result {
            Ok(()) => {
                if let (Pool::Hash(s), SupplyRecord::Hash(recs)) = (&mut *self, record) {
                    for rid in recs.iter().filter_map(|r| r.remainder_id) {
                        s.confirm_remainder(&rid);
                    }
                }
                Ok(done)
            }
            Err(e) => {
                let partial = match record {
                    SupplyRecord::Hash(r) => SupplyRecord::Hash(r[..done.len()].to_vec()),
                    SupplyRecord::Queue(r) => SupplyRecord::Queue(r[..done.len()].to_vec()),
                    SupplyRecord::Deque(r) => SupplyRecord::Deque(r[..done.len()].to_vec()),
                };
                self.rollback(&partial, done);
                Err(e)
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Pending {
    app: AppId,
    direction: Direction,
    keys: Vec<SupplyKey>,
    record: SupplyRecord,
    abandoned: bool,
}

enum Built {
    Single(Vec<SupplyKey>, Vec<(KeyId, Uuid)>),
    Synced(Vec<SupplyKey>, SupplyRecord),
}

/// One key manager of a pair: stores, link state, and the supply logic.
///
/// Every method runs to completion without blocking; messages for the peer
/// collect in an outbox and observable outcomes in an event list.
#[derive(Debug)]
pub struct KeyManager {
    role: KmRole,
    settings: KmSettings,
    common: CommonStore,
    pools: [Pool; 2],
    ids: IdGenerator,
    outbox: Vec<KmMessage>,
    next_out_seq: u64,
    next_in_seq: u64,
    early: BTreeMap<u64, KmMessage>,
    deferred: VecDeque<KmMessage>,
    pending: HashMap<u64, Pending>,
    deliverables: HashMap<Uuid, SupplyKey>,
    served_single: HashMap<KeyId, Uuid>,
    deque_requests: HashSet<(Direction, u32)>,
    /// Stores currently below target for lack of common keys; a shortfall
    /// is counted once when a store enters this set.
    short: HashSet<(Direction, Option<Uuid>)>,
    events: Vec<KmEvent>,
    stats: KmStats,
}

impl KeyManager {
    pub fn new(role: KmRole, settings: KmSettings, ids: IdGenerator) -> Result<Self, KeystoreError> {
        let common = CommonStore::new(settings.default_key_size_bytes, settings.capacity_keys)?;
        let pool = |dir: Direction| {
            let purpose = if dir.sender() == role {
                Purpose::Encryption
            } else {
                Purpose::Decryption
            };
            Pool::new(settings.design, purpose, settings.default_key_size_bytes)
        };
        Ok(Self {
            role,
            pools: [pool(Direction::MasterToSlave), pool(Direction::SlaveToMaster)],
            settings,
            common,
            ids,
            outbox: Vec::new(),
            next_out_seq: 0,
            next_in_seq: 0,
            early: BTreeMap::new(),
            deferred: VecDeque::new(),
            pending: HashMap::new(),
            deliverables: HashMap::new(),
            served_single: HashMap::new(),
            deque_requests: HashSet::new(),
            short: HashSet::new(),
            events: Vec::new(),
            stats: KmStats::default(),
        })
    }

    pub fn role(&self) -> KmRole {
        self.role
    }

    pub fn settings(&self) -> &KmSettings {
        &self.settings
    }

    pub fn design(&self) -> Design {
        self.settings.design
    }

    pub fn common(&self) -> &CommonStore {
        &self.common
    }

    pub fn stats(&self) -> KmStats {
        self.stats
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    pub fn deferred_count(&self) -> usize {
        self.deferred.len()
    }

    pub fn levels(&self) -> KmLevels {
        KmLevels {
            common_keys: self.common.len(),
            pool_bytes: [self.pools[0].bytes(), self.pools[1].bytes()],
            deques: self.deque_count(),
        }
    }

    pub fn deque_count(&self) -> usize {
        self.pools
            .iter()
            .map(|p| match p {
                Pool::Deque { registry, .. } => registry.len(),
                _ => 0,
            })
            .sum()
    }

    /// Element sizes of the deques serving `direction`, in creation order.
    pub fn deque_sizes(&self, direction: Direction) -> Vec<u32> {
        match &self.pools[direction.index()] {
            Pool::Deque { registry, .. } => registry.iter().map(|d| d.element_size_bits()).collect(),
            _ => Vec::new(),
        }
    }

    /// Bytes held by every store, excluding keys awaiting the receiving
    /// application and keys in flight.
    pub fn stored_bytes(&self) -> usize {
        self.common.bytes() + self.pools.iter().map(Pool::bytes).sum::<usize>()
    }

    pub fn drain_outbox(&mut self) -> Vec<KmMessage> {
        std::mem::take(&mut self.outbox)
    }

    pub fn has_outbox(&self) -> bool {
        !self.outbox.is_empty()
    }

    pub fn drain_events(&mut self) -> Vec<KmEvent> {
        std::mem::take(&mut self.events)
    }

    fn send(&mut self, payload: KmPayload) -> u64 {
        let msg_seq = self.next_out_seq;
        self.next_out_seq += 1;
        self.outbox.push(KmMessage { msg_seq, payload });
        msg_seq
    }

    /// Cuts a raw key from the quantum layer into the common store, then
    /// applies any peer messages that were waiting for these keys.
    pub fn ingest(&mut self, raw: &[u8], stream: u64) -> Result<IngestReport, LinkError> {
        let report = self
            .common
            .ingest(raw, stream)
            .map_err(|e| LinkError::Config(e.to_string()))?;
        self.retry_deferred()?;
        Ok(report)
    }

    /// Hands a key received by a supply on the peer to the receiving application, once.
    pub fn take_deliverable(&mut self, uuid: &Uuid) -> Option<SupplyKey> {
        self.deliverables.remove(uuid)
    }

    /// Builds supply keys for a local application.
    ///
    /// The returned duration covers request interpretation, key construction
    /// and UUID assignment; message creation and link traffic are excluded.
    pub fn supply(&mut self, req: &SupplyRequest) -> Result<Supplied, SupplyError> {
        let start = Instant::now();
        let built = self.build(req)?;
        let created_in = start.elapsed();
        let status = match built {
            Built::Single(keys, served) => {
                self.served_single.extend(served.iter().copied());
                self.send(KmPayload::ReserveNotice { served });
                SupplyStatus::Delivered(keys)
            }
            Built::Synced(keys, record) => {
                let direction = Direction::sent_by(self.role);
                let seq = self.send(KmPayload::SupplyCreate {
                    direction,
                    record: record.clone(),
                });
                self.pending.insert(
                    seq,
                    Pending {
                        app: req.app,
                        direction,
                        keys,
                        record,
                        abandoned: false,
                    },
                );
                SupplyStatus::Pending { seq }
            }
        };
        Ok(Supplied { created_in, status })
    }

    fn build(&mut self, req: &SupplyRequest) -> Result<Built, SupplyError> {
        let direction = Direction::sent_by(self.role);
        let d = self.settings.default_key_size_bytes;
        match &mut self.pools[direction.index()] {
            Pool::None => {
                if req.size_bits as usize != d * 8 {
                    return Err(KeystoreError::FixedSize {
                        requested: req.size_bits,
                        fixed: (d * 8) as u32,
                    }
                    .into());
                }
                if req.count == 0 || self.common.len() < req.count {
                    return Err(SupplyError::Unavailable);
                }
                let mut keys = Vec::with_capacity(req.count);
                let mut served = Vec::with_capacity(req.count);
                for _ in 0..req.count {
                    let key = self.common.take_random(self.ids.rng()).expect("length checked");
                    let uuid = self.ids.next_uuid();
                    served.push((key.id, uuid));
                    keys.push(SupplyKey {
                        uuid,
                        material: key.material,
                    });
                }
                Ok(Built::Single(keys, served))
            }
            Pool::Hash(store) => {
                let out = store.supply(req.size_bits, req.count, &mut self.ids)?;
                Ok(Built::Synced(out.keys, SupplyRecord::Hash(out.records)))
            }
            Pool::Queue(queue) => {
                let out = queue.supply(req.size_bits, req.count, &mut self.ids)?;
                let mut keys = Vec::with_capacity(out.len());
                let mut recs = Vec::with_capacity(out.len());
                for (key, range) in out {
                    recs.push(QueueSupply {
                        uuid: key.uuid,
                        range,
                    });
                    keys.push(key);
                }
                Ok(Built::Synced(keys, SupplyRecord::Queue(recs)))
            }
            Pool::Deque { registry, .. } => {
                let deque_id = match registry.select(req.size_bits)? {
                    DequeSelection::Exact(id) | DequeSelection::Divisor(id) => id,
                    DequeSelection::Create => {
                        self.request_deque(direction, req.size_bits);
                        return Err(SupplyError::NoDeque {
                            size_bits: req.size_bits,
                        });
                    }
                };
                let deque = registry.get_mut(&deque_id).expect("selected from registry");
                deque.subscribe(req.app);
                let out = deque.supply(req.size_bits, req.count, &mut self.ids)?;
                let mut keys = Vec::with_capacity(out.len());
                let mut recs = Vec::with_capacity(out.len());
                for (key, rec) in out {
                    keys.push(key);
                    recs.push(rec);
                }
                Ok(Built::Synced(keys, SupplyRecord::Deque(recs)))
            }
        }
    }

    /// No deque serves `size_bits`: the master creates one, the slave asks for one.
    fn request_deque(&mut self, direction: Direction, size_bits: u32) {
        match self.role {
            KmRole::Master => {
                self.create_deque(direction, size_bits);
            }
            KmRole::Slave => {
                if self.deque_requests.insert((direction, size_bits)) {
                    self.send(KmPayload::CreateDeque {
                        direction,
                        deque_id: None,
                        element_size_bits: size_bits,
                    });
                }
            }
        }
    }

    fn create_deque(&mut self, direction: Direction, size_bits: u32) -> Option<Uuid> {
        let deque_id = self.ids.next_uuid();
        let Pool::Deque { registry, .. } = &mut self.pools[direction.index()] else {
            return None;
        };
        registry.create(deque_id, size_bits).ok()?;
        self.send(KmPayload::CreateDeque {
            direction,
            deque_id: Some(deque_id),
            element_size_bits: size_bits,
        });
        self.events.push(KmEvent::DequeCreated {
            direction,
            deque_id,
            element_size_bits: size_bits,
        });
        self.fill_deque(direction, deque_id);
        Some(deque_id)
    }

    /// Gives up waiting for the peer's answer to supply `seq`. The keys are
    /// withheld from the application; a late answer still settles the stores.
    pub fn expire(&mut self, seq: u64) -> Option<AppId> {
        let p = self.pending.get_mut(&seq)?;
        if p.abandoned {
            return None;
        }
        p.abandoned = true;
        self.stats.abandoned += 1;
        Some(p.app)
    }

    /// Moves `count` common-store keys to the purpose store of `direction`.
    fn assign_to(&mut self, direction: Direction, count: usize) -> usize {
        if count == 0 {
            return 0;
        }
        let keys = self.common.take_front(count);
        let moved = keys.len();
        if moved == 0 {
            return 0;
        }
        let key_ids = keys.iter().map(|k| k.id).collect();
        self.pools[direction.index()]
            .assign(keys)
            .expect("common-store keys always fit a purpose store");
        self.send(KmPayload::AssignPurpose { direction, key_ids });
        moved
    }

    fn note_short(&mut self, store: (Direction, Option<Uuid>), short: bool) {
        if !short {
            self.short.remove(&store);
        } else if self.short.insert(store) {
            self.stats.shortfalls += 1;
        }
    }

    fn top_up(&mut self, direction: Direction) {
        let d = self.settings.default_key_size_bytes;
        let level = match &self.pools[direction.index()] {
            Pool::None => return,
            Pool::Hash(s) | Pool::Deque { source: s, .. } => s.len(),
            Pool::Queue(q) => q.len() / d,
        };
        let (count, short) = top_up_count(level, self.settings.water_marks(d), self.common.len());
        self.note_short((direction, None), short);
        self.assign_to(direction, count);
    }

    fn fill_deque(&mut self, direction: Direction, deque_id: Uuid) {
        let d = self.settings.default_key_size_bytes;
        let (len, element_bits, staged, source_len) = match &self.pools[direction.index()] {
            Pool::Deque { source, registry } => match registry.get(&deque_id) {
                Some(q) => (q.len(), q.element_size_bits(), q.staged_bytes(), source.len()),
                None => return,
            },
            _ => return,
        };
        let marks = self.settings.water_marks(element_bits as usize / 8);
        if len >= marks.low {
            self.note_short((direction, Some(deque_id)), false);
            return;
        }
        let need_bytes = ((marks.high - len) * element_bits as usize / 8).saturating_sub(staged);
        let need_keys = need_bytes.div_ceil(d);
        let mut short = false;
        if source_len < need_keys {
            let wanted = need_keys - source_len;
            short = self.assign_to(direction, wanted) < wanted;
        }
        self.note_short((direction, Some(deque_id)), short);
        let Pool::Deque { source, registry } = &mut self.pools[direction.index()] else {
            return;
        };
        let deque = registry.get_mut(&deque_id).expect("looked up above");
        let fill = deque.fill(source, marks.high, &mut self.ids);
        if !fill.is_empty() {
            self.send(KmPayload::FillDeque { direction, fill });
        }
    }

    /// Master only: restores purpose stores and deques to their high-water
    /// marks from the common store. A no-op on the slave. Returns whether
    /// any store changed.
    pub fn maintain(&mut self) -> bool {
        if self.role != KmRole::Master {
            return false;
        }
        let before = self.next_out_seq;
        for direction in Direction::ALL {
            let deques: Vec<Uuid> = match &self.pools[direction.index()] {
                Pool::Deque { registry, .. } => registry.iter().map(|d| d.deque_id()).collect(),
                Pool::None => continue,
                _ => Vec::new(),
            };
            for id in deques {
                self.fill_deque(direction, id);
            }
            self.top_up(direction);
        }
        self.next_out_seq != before
    }

    /// Accepts one message from the peer. Messages are applied in `msg_seq`
    /// order; duplicates are ignored and early arrivals are held back.
    pub fn receive(&mut self, msg: KmMessage) -> Result<(), LinkError> {
        if msg.msg_seq < self.next_in_seq {
            return Ok(());
        }
        if msg.msg_seq > self.next_in_seq {
            self.early.insert(msg.msg_seq, msg);
            return Ok(());
        }
        self.next_in_seq += 1;
        self.enqueue(msg)?;
        while let Some(next) = self.early.remove(&self.next_in_seq) {
            self.next_in_seq += 1;
            self.enqueue(next)?;
        }
        Ok(())
    }

    fn enqueue(&mut self, msg: KmMessage) -> Result<(), LinkError> {
        if !self.deferred.is_empty() || !self.apply(&msg)? {
            self.stats.deferred_messages += 1;
            self.deferred.push_back(msg);
        }
        Ok(())
    }

    fn retry_deferred(&mut self) -> Result<(), LinkError> {
        while let Some(msg) = self.deferred.pop_front() {
            if !self.apply(&msg)? {
                self.deferred.push_front(msg);
                break;
            }
        }
        Ok(())
    }

    fn protocol(&self, msg: &KmMessage) -> LinkError {
        LinkError::Protocol {
            role: self.role,
            kind: msg.kind(),
        }
    }

    /// Applies `msg`; `Ok(false)` means it names keys not ingested here yet.
    fn apply(&mut self, msg: &KmMessage) -> Result<bool, LinkError> {
        match &msg.payload {
            KmPayload::AssignPurpose { direction, key_ids } => {
                if self.role == KmRole::Master {
                    return Err(self.protocol(msg));
                }
                if self.common.missing_ids(key_ids).is_some() {
                    return Ok(false);
                }
                let keys = self.common.take_ids(key_ids).map_err(LinkError::Desync)?;
                self.pools[direction.index()]
                    .assign(keys)
                    .map_err(LinkError::Desync)?;
            }
            KmPayload::CreateDeque {
                direction,
                deque_id: Some(deque_id),
                element_size_bits,
            } => {
                if self.role == KmRole::Master {
                    return Err(self.protocol(msg));
                }
                let Pool::Deque { registry, .. } = &mut self.pools[direction.index()] else {
                    return Err(self.protocol(msg));
                };
                registry
                    .create(*deque_id, *element_size_bits)
                    .map_err(|e| LinkError::Desync(ReplayError::Malformed(e.to_string())))?;
                self.events.push(KmEvent::DequeCreated {
                    direction: *direction,
                    deque_id: *deque_id,
                    element_size_bits: *element_size_bits,
                });
            }
            KmPayload::CreateDeque {
                direction,
                deque_id: None,
                element_size_bits,
            } => {
                if self.role == KmRole::Slave {
                    return Err(self.protocol(msg));
                }
                let Pool::Deque { registry, .. } = &self.pools[direction.index()] else {
                    return Err(self.protocol(msg));
                };
                let selection = registry
                    .select(*element_size_bits)
                    .map_err(|e| LinkError::Desync(ReplayError::Malformed(e.to_string())))?;
                if selection == DequeSelection::Create {
                    self.create_deque(*direction, *element_size_bits);
                }
            }
            KmPayload::FillDeque { direction, fill } => {
                if self.role == KmRole::Master {
                    return Err(self.protocol(msg));
                }
                let Pool::Deque { source, registry } = &mut self.pools[direction.index()] else {
                    return Err(self.protocol(msg));
                };
                let deque = registry
                    .get_mut(&fill.deque_id)
                    .ok_or(LinkError::Desync(ReplayError::UnknownDeque(fill.deque_id)))?;
                deque.replay_fill(source, fill).map_err(LinkError::Desync)?;
            }
            KmPayload::SupplyCreate { direction, record } => {
                if direction.sender() == self.role {
                    return Err(self.protocol(msg));
                }
                let supply_seq = msg.msg_seq;
                match self.pools[direction.index()].replay(record) {
                    Ok(keys) => {
                        let uuids = keys.iter().map(|k| k.uuid).collect();
                        if self.settings.retain_deliverables {
                            for key in keys {
                                self.deliverables.insert(key.uuid, key);
                            }
                        }
                        self.send(KmPayload::Confirm {
                            supply_seq,
                            record_hash: record_hash(record),
                        });
                        self.events.push(KmEvent::Replayed { uuids });
                    }
                    Err(reason) => {
                        self.stats.rejects_sent += 1;
                        self.send(KmPayload::Reject { supply_seq, reason });
                    }
                }
            }
            KmPayload::Confirm {
                supply_seq,
                record_hash: hash,
            } => {
                let Some(p) = self.pending.remove(supply_seq) else {
                    return Err(self.protocol(msg));
                };
                if record_hash(&p.record) != *hash {
                    return Err(LinkError::Desync(ReplayError::Malformed(format!(
                        "confirm for supply {supply_seq} carries a different record hash"
                    ))));
                }
                if let (Pool::Hash(s), SupplyRecord::Hash(recs)) =
                    (&mut self.pools[p.direction.index()], &p.record)
                {
                    for rid in recs.iter().filter_map(|r| r.remainder_id) {
                        s.confirm_remainder(&rid);
                    }
                }
                if !p.abandoned {
                    self.events.push(KmEvent::Confirmed {
                        seq: *supply_seq,
                        app: p.app,
                        keys: p.keys,
                    });
                }
            }
            KmPayload::Reject { supply_seq, reason } => {
                let Some(p) = self.pending.remove(supply_seq) else {
                    return Err(self.protocol(msg));
                };
                self.stats.rejects_received += 1;
                self.pools[p.direction.index()].rollback(&p.record, p.keys);
                if !p.abandoned {
                    self.events.push(KmEvent::Rejected {
                        seq: *supply_seq,
                        app: p.app,
                        reason: reason.clone(),
                    });
                }
            }
            KmPayload::ReserveNotice { served } => {
                let known = |id: &KeyId| self.common.contains(id) || self.served_single.contains_key(id);
                if !served.iter().all(|(id, _)| known(id)) {
                    return Ok(false);
                }
                for (id, remote_uuid) in served {
                    match self.common.remove(id) {
                        Some(key) => {
                            if self.settings.retain_deliverables {
                                self.deliverables.insert(
                                    *remote_uuid,
                                    SupplyKey {
                                        uuid: *remote_uuid,
                                        material: key.material,
                                    },
                                );
                            }
                        }
                        None => {
                            let local_uuid = self.served_single[id];
                            self.stats.collisions += 1;
                            self.events.push(KmEvent::Collision {
                                key_id: *id,
                                local_uuid,
                                remote_uuid: *remote_uuid,
                            });
                        }
                    }
                }
            }
        }
        Ok(true)
    }

    /// Digest of everything both managers must agree on once the link is
    /// quiet: common-store content and order, and each direction's stores.
    pub fn mirror_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.settings.design.name().as_bytes());
        h.update(b"common");
        for key in self.common.iter() {
            h.update(key.id.to_bytes());
            h.update(&key.material);
        }
        for direction in Direction::ALL {
            h.update([direction.index() as u8]);
            self.pools[direction.index()].digest_into(&mut h);
        }
        h.finalize().into()
    }
}
