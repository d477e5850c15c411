use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uuid::Uuid;

use super::models::{AppModel, QkdLinkModel};
use super::time::SimTime;
use super::trace::{Attempt, CollisionEvent, LevelSample, Outcome, RunCounters, RunTrace, TimingSample};
use super::SimError;
use crate::ids::{stream_rng, IdGenerator, KeyId, Stream};
use crate::keystore::Design;
use crate::kmlink::{KeyManager, KmEvent, KmMessage, KmRole, KmSettings, SupplyRequest, SupplyStatus};

/// How a failed application waits for its next attempt.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetryMode {
    /// Re-issue every hold time until a request succeeds.
    Poll,
    /// Sleep until the local key manager gains material, then retry at the
    /// next hold-time boundary, counting the polls that would have failed.
    /// Produces the same attempt outcomes as polling with far fewer events.
    #[default]
    Coalesce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub run: u64,
    pub quantum: QkdLinkModel,
    pub km: KmSettings,
    pub link_delay: SimTime,
    pub confirm_timeout: SimTime,
    pub maintain_interval: SimTime,
    pub apps: Vec<AppModel>,
    pub retry: RetryMode,
    /// Keep every link message as a JSON line in the trace.
    pub record_messages: bool,
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.quantum.validate()?;
        if self.km.default_key_size_bytes == 0 {
            return Err(SimError::invalid("km.default_key_size_bytes", "must be positive"));
        }
        if self.km.capacity_keys == 0 {
            return Err(SimError::invalid("km.capacity_keys", "must be positive"));
        }
        if self.km.working_set_bytes == 0 {
            return Err(SimError::invalid("km.working_set_bytes", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.km.low_water_fraction) {
            return Err(SimError::invalid("km.low_water_fraction", "must lie in [0, 1]"));
        }
        if self.maintain_interval == SimTime::ZERO {
            return Err(SimError::invalid("km.maintain_interval_s", "must be positive"));
        }
        if self.confirm_timeout == SimTime::ZERO {
            return Err(SimError::invalid("km.confirm_timeout_s", "must be positive"));
        }
        for app in &self.apps {
            app.validate()?;
            if app.key_size_bits() % 8 != 0 {
                return Err(SimError::invalid("service.packet_size_bytes", "key size must be whole bytes"));
            }
            if self.km.design == Design::SingleCommon
                && app.key_size_bits() as usize != self.km.default_key_size_bytes * 8
            {
                return Err(SimError::invalid(
                    "km.default_key_size_bytes",
                    "the single-common design serves only keys of the default size",
                ));
            }
        }
        Ok(())
    }

    pub fn end_time(&self) -> SimTime {
        self.apps
            .iter()
            .map(|a| a.stop)
            .chain([self.quantum.stop])
            .max()
            .unwrap_or(SimTime::ZERO)
    }

    /// Digest of what the applications and the QKD link do, independent of
    /// the storage design.
    pub fn workload_hash(&self) -> [u8; 32] {
        let bytes = bincode::serialize(&(self.seed, self.run, &self.quantum, &self.apps))
            .expect("in-memory serialization cannot fail");
        Sha256::digest(bytes).into()
    }
}

#[derive(Debug)]
enum EventKind {
    KeyGenerated { k: u64 },
    AppPacketReady { app: usize, k: u64 },
    GetKeyRequest { app: usize },
    HoldTimerExpired { app: usize },
    KmMessageDelivery { to: KmRole, msg: KmMessage },
    MaintainTick,
    ConfirmTimeout { side: KmRole, seq: u64 },
}

impl EventKind {
    /// Events that stop at the end of the run; link traffic drains past it.
    fn bounded_by_end(&self) -> bool {
        !matches!(
            self,
            EventKind::KmMessageDelivery { .. } | EventKind::ConfirmTimeout { .. }
        )
    }
}

#[derive(Debug)]
struct Scheduled {
    time: SimTime,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed so the max-heap pops the earliest (time, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

#[derive(Debug)]
struct AppState {
    model: AppModel,
    total_packets: u64,
    sent: u64,
    /// Generated packets waiting for key coverage.
    waiting: u64,
    /// Packets covered by keys already held.
    budget: u64,
    /// A request is outstanding or a retry is scheduled or parked.
    busy: bool,
    /// Time of the failed attempt and its position among same-time parks.
    parked_since: Option<(SimTime, u64)>,
}

impl AppState {
    fn request_count(&self) -> usize {
        let uncovered = self.total_packets.saturating_sub(self.sent + self.budget);
        let keys = uncovered.div_ceil(self.model.packets_per_key());
        (self.model.keys_per_query as u64).min(keys) as usize
    }
}

#[derive(Debug, Clone, Copy)]
struct PendingAttempt {
    app: usize,
    time: SimTime,
    residual: u64,
    count: u32,
    nanos: u64,
}

struct Simulator {
    cfg: SimConfig,
    end: SimTime,
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Scheduled>,
    kms: [KeyManager; 2],
    material: ChaCha8Rng,
    apps: Vec<AppState>,
    pending: HashMap<(KmRole, u64), PendingAttempt>,
    single_attempt: HashMap<Uuid, usize>,
    collided: HashSet<KeyId>,
    attempts: Vec<Attempt>,
    collisions: Vec<CollisionEvent>,
    counters: RunCounters,
    levels: Vec<LevelSample>,
    timing: Vec<TimingSample>,
    messages: Vec<String>,
}

fn side_index(role: KmRole) -> usize {
    match role {
        KmRole::Master => 0,
        KmRole::Slave => 1,
    }
}

/// Runs one simulation to completion.
pub fn run(cfg: &SimConfig) -> Result<RunTrace, SimError> {
    cfg.validate()?;
    let mut sim = Simulator::new(cfg.clone())?;
    sim.schedule_initial();
    while let Some(ev) = sim.queue.pop() {
        if ev.time > sim.end && ev.kind.bounded_by_end() {
            continue;
        }
        debug_assert!(ev.time >= sim.now, "clock moved backwards");
        sim.now = ev.time;
        sim.dispatch(ev.kind)?;
    }
    Ok(sim.finish())
}

impl Simulator {
    fn new(cfg: SimConfig) -> Result<Self, SimError> {
        let master = KeyManager::new(
            KmRole::Master,
            cfg.km.clone(),
            IdGenerator::new(stream_rng(cfg.seed, cfg.run, Stream::Master)),
        )?;
        let slave = KeyManager::new(
            KmRole::Slave,
            cfg.km.clone(),
            IdGenerator::new(stream_rng(cfg.seed, cfg.run, Stream::Slave)),
        )?;
        let apps = cfg
            .apps
            .iter()
            .map(|m| AppState {
                total_packets: m.packet_count(),
                model: m.clone(),
                sent: 0,
                waiting: 0,
                budget: 0,
                busy: false,
                parked_since: None,
            })
            .collect();
        Ok(Self {
            end: cfg.end_time(),
            material: stream_rng(cfg.seed, cfg.run, Stream::KeyMaterial),
            cfg,
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            kms: [master, slave],
            apps,
            pending: HashMap::new(),
            single_attempt: HashMap::new(),
            collided: HashSet::new(),
            attempts: Vec::new(),
            collisions: Vec::new(),
            counters: RunCounters::default(),
            levels: Vec::new(),
            timing: Vec::new(),
            messages: Vec::new(),
        })
    }

    fn schedule(&mut self, time: SimTime, kind: EventKind) {
        if time > self.end && kind.bounded_by_end() {
            return;
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Scheduled { time, seq, kind });
    }

    fn schedule_initial(&mut self) {
        if self.cfg.quantum.emission_count() > 0 {
            let t = self.cfg.quantum.emission_time(1);
            self.schedule(t, EventKind::KeyGenerated { k: 1 });
        }
        for i in 0..self.apps.len() {
            if self.apps[i].total_packets > 0 {
                let t = self.apps[i].model.packet_time(1);
                self.schedule(t, EventKind::AppPacketReady { app: i, k: 1 });
            }
        }
        self.schedule(self.cfg.maintain_interval, EventKind::MaintainTick);
    }

    fn km(&mut self, side: KmRole) -> &mut KeyManager {
        &mut self.kms[side_index(side)]
    }

    fn dispatch(&mut self, kind: EventKind) -> Result<(), SimError> {
        match kind {
            EventKind::KeyGenerated { k } => {
                let mut raw = vec![0u8; self.cfg.quantum.key_size_bytes];
                self.material.fill_bytes(&mut raw);
                self.counters.generated_bytes += raw.len() as u64;
                for side in [KmRole::Master, KmRole::Slave] {
                    self.km(side).ingest(&raw, k)?;
                }
                self.kms[0].maintain();
                self.settle(KmRole::Master);
                self.settle(KmRole::Slave);
                self.wake(KmRole::Master);
                self.wake(KmRole::Slave);
                if k < self.cfg.quantum.emission_count() {
                    let t = self.cfg.quantum.emission_time(k + 1);
                    self.schedule(t, EventKind::KeyGenerated { k: k + 1 });
                }
            }
            EventKind::AppPacketReady { app, k } => {
                self.counters.packets_generated += 1;
                let a = &mut self.apps[app];
                a.waiting += 1;
                if k < a.total_packets {
                    let t = a.model.packet_time(k + 1);
                    self.schedule(t, EventKind::AppPacketReady { app, k: k + 1 });
                }
                self.drain_packets(app);
                let a = &mut self.apps[app];
                if a.waiting > 0 && !a.busy {
                    a.busy = true;
                    self.schedule(self.now, EventKind::GetKeyRequest { app });
                }
            }
            EventKind::GetKeyRequest { app } | EventKind::HoldTimerExpired { app } => {
                self.attempt(app);
            }
            EventKind::KmMessageDelivery { to, msg } => {
                self.km(to).receive(msg)?;
                if to == KmRole::Master {
                    self.kms[0].maintain();
                }
                self.settle(to);
                self.wake(to);
            }
            EventKind::MaintainTick => {
                if self.kms[0].maintain() {
                    self.wake(KmRole::Master);
                }
                self.settle(KmRole::Master);
                self.sample_levels();
                let next = self.now + self.cfg.maintain_interval;
                self.schedule(next, EventKind::MaintainTick);
            }
            EventKind::ConfirmTimeout { side, seq } => {
                if self.km(side).expire(seq).is_some() {
                    self.counters.abandoned += 1;
                    if let Some(p) = self.pending.remove(&(side, seq)) {
                        self.fail(p.app);
                    }
                }
            }
        }
        Ok(())
    }

    /// Forwards outgoing messages and handles events raised at `side`.
    fn settle(&mut self, side: KmRole) {
        let out = self.km(side).drain_outbox();
        let arrive = self.now + self.cfg.link_delay;
        for msg in out {
            if self.cfg.record_messages {
                self.messages.push(msg.to_json_line());
            }
            self.schedule(arrive, EventKind::KmMessageDelivery { to: side.peer(), msg });
        }
        let events = self.km(side).drain_events();
        for event in events {
            self.on_event(side, event);
        }
    }

    fn on_event(&mut self, side: KmRole, event: KmEvent) {
        match event {
            KmEvent::Confirmed { seq, .. } => {
                if let Some(p) = self.pending.remove(&(side, seq)) {
                    let a = &self.apps[p.app];
                    self.attempts.push(Attempt {
                        time: p.time,
                        side,
                        app: a.model.id,
                        size_bits: a.model.key_size_bits(),
                        count: p.count,
                        residual: p.residual,
                        outcome: Outcome::Success,
                    });
                    self.timing.push(TimingSample {
                        size_bits: a.model.key_size_bits(),
                        count: p.count,
                        nanos: p.nanos,
                    });
                    self.granted(p.app, p.count as u64);
                }
            }
            KmEvent::Rejected { seq, .. } => {
                self.counters.rejects += 1;
                if let Some(p) = self.pending.remove(&(side, seq)) {
                    self.fail(p.app);
                }
            }
            KmEvent::Collision {
                key_id, local_uuid, ..
            } => self.on_collision(side, key_id, local_uuid),
            KmEvent::DequeCreated { .. } => {
                if side == KmRole::Master {
                    self.counters.deques_created += 1;
                }
            }
            KmEvent::Replayed { .. } => {}
        }
    }

    fn attempt(&mut self, app: usize) {
        let a = &self.apps[app];
        let count = a.request_count();
        if count == 0 || a.waiting == 0 {
            self.apps[app].busy = false;
            return;
        }
        let side = a.model.side;
        let size_bits = a.model.key_size_bits();
        let req = SupplyRequest {
            app: a.model.id,
            size_bits,
            count,
        };
        self.counters.requests += 1;
        let residual = self.km(side).common().len() as u64;
        match self.km(side).supply(&req) {
            Ok(supplied) => {
                let nanos = supplied.created_in.as_nanos() as u64;
                match supplied.status {
                    SupplyStatus::Delivered(keys) => {
                        let idx = self.attempts.len();
                        self.attempts.push(Attempt {
                            time: self.now,
                            side,
                            app: req.app,
                            size_bits,
                            count: count as u32,
                            residual,
                            outcome: Outcome::Success,
                        });
                        for key in &keys {
                            self.single_attempt.insert(key.uuid, idx);
                        }
                        self.timing.push(TimingSample {
                            size_bits,
                            count: count as u32,
                            nanos,
                        });
                        self.granted(app, count as u64);
                    }
                    SupplyStatus::Pending { seq } => {
                        self.pending.insert(
                            (side, seq),
                            PendingAttempt {
                                app,
                                time: self.now,
                                residual,
                                count: count as u32,
                                nanos,
                            },
                        );
                        let t = self.now + self.cfg.confirm_timeout;
                        self.schedule(t, EventKind::ConfirmTimeout { side, seq });
                    }
                }
            }
            Err(_) => {
                self.counters.unavailable += 1;
                self.fail(app);
            }
        }
        if side == KmRole::Master && self.kms[0].maintain() {
            self.wake(KmRole::Master);
        }
        self.settle(side);
    }

    fn drain_packets(&mut self, app: usize) {
        let a = &mut self.apps[app];
        let n = a.waiting.min(a.budget);
        a.waiting -= n;
        a.budget -= n;
        a.sent += n;
        self.counters.packets_sent += n;
    }

    fn granted(&mut self, app: usize, keys: u64) {
        self.counters.successes += 1;
        let a = &mut self.apps[app];
        self.counters.requested_key_bytes += keys * a.model.key_size_bits() as u64 / 8;
        a.budget += keys * a.model.packets_per_key();
        a.busy = false;
        self.drain_packets(app);
        let a = &mut self.apps[app];
        if a.waiting > 0 {
            a.busy = true;
            let t = self.now + a.model.request_gap;
            self.schedule(t, EventKind::GetKeyRequest { app });
        }
    }

    fn fail(&mut self, app: usize) {
        let a = &mut self.apps[app];
        a.busy = true;
        match self.cfg.retry {
            RetryMode::Poll => {
                let t = self.now + a.model.hold;
                self.schedule(t, EventKind::HoldTimerExpired { app });
            }
            RetryMode::Coalesce => {
                a.parked_since = Some((self.now, self.next_seq));
                self.next_seq += 1;
            }
        }
    }

    /// Key material may have appeared at `side`: parked applications retry
    /// at their next hold-time boundary.
    fn wake(&mut self, side: KmRole) {
        let mut due = Vec::new();
        for (i, a) in self.apps.iter_mut().enumerate() {
            if a.model.side != side {
                continue;
            }
            let Some((since, order)) = a.parked_since.take() else {
                continue;
            };
            let hold = a.model.hold.as_micros();
            let elapsed = (self.now - since).as_micros();
            let polls = elapsed.div_ceil(hold).max(1);
            self.counters.requests += polls - 1;
            self.counters.unavailable += polls - 1;
            due.push((since + SimTime(polls * hold), order, i));
        }
        // Same order a polling application would have retried in.
        due.sort_unstable();
        for (t, _, app) in due {
            self.schedule(t, EventKind::HoldTimerExpired { app });
        }
    }

    fn on_collision(&mut self, side: KmRole, key_id: KeyId, local_uuid: Uuid) {
        let Some(&idx) = self.single_attempt.get(&local_uuid) else {
            return;
        };
        if self.collided.insert(key_id) {
            self.counters.collisions += 1;
            self.collisions.push(CollisionEvent {
                time: self.now,
                key_id,
                detected_by: side,
                residual: self.attempts[idx].residual,
            });
        }
        if self.attempts[idx].outcome == Outcome::Collision {
            return;
        }
        self.attempts[idx].outcome = Outcome::Collision;
        self.counters.successes -= 1;
        // The key is discarded: whatever it covered must be covered again.
        let app = self
            .apps
            .iter()
            .position(|a| a.model.id == self.attempts[idx].app)
            .expect("attempt belongs to a known app");
        let a = &mut self.apps[app];
        let lost = a.model.packets_per_key();
        let from_budget = lost.min(a.budget);
        a.budget -= from_budget;
        let resend = (lost - from_budget).min(a.sent);
        a.sent -= resend;
        a.waiting += resend;
        self.counters.packets_sent -= resend;
        if a.waiting > 0 && !a.busy {
            a.busy = true;
            let t = self.now + a.model.hold;
            self.schedule(t, EventKind::HoldTimerExpired { app });
        }
    }

    fn sample_levels(&mut self) {
        let m = self.kms[0].levels();
        let s = self.kms[1].levels();
        self.levels.push(LevelSample {
            time: self.now,
            common_keys: [m.common_keys as u64, s.common_keys as u64],
            pool_bytes: [
                [m.pool_bytes[0] as u64, m.pool_bytes[1] as u64],
                [s.pool_bytes[0] as u64, s.pool_bytes[1] as u64],
            ],
        });
    }

    fn finish(mut self) -> RunTrace {
        // Polls a parked application would still have made before the end.
        for a in &self.apps {
            if let Some((since, _)) = a.parked_since {
                let polls = (self.end - since).as_micros() / a.model.hold.as_micros();
                self.counters.requests += polls;
                self.counters.unavailable += polls;
            }
        }
        let stats = [self.kms[0].stats(), self.kms[1].stats()];
        self.counters.shortfalls = stats[0].shortfalls;
        let common = self.kms[0].common().stats();
        self.counters.waste_bytes = common.waste_bytes;
        self.counters.overflow_keys = common.overflow_keys;
        let distinct_sizes = self
            .cfg
            .apps
            .iter()
            .map(|a| (a.side, a.key_size_bits()))
            .collect::<BTreeSet<_>>()
            .len();
        RunTrace {
            seed: self.cfg.seed,
            run: self.cfg.run,
            design: self.cfg.km.design,
            default_key_size_bits: (self.cfg.km.default_key_size_bytes * 8) as u32,
            app_count: self.cfg.apps.len(),
            end_time: self.end,
            attempts: self.attempts,
            collisions: self.collisions,
            counters: self.counters,
            levels: self.levels,
            deque_count: self.kms[0].deque_count(),
            distinct_sizes,
            end_digests: [self.kms[0].mirror_digest(), self.kms[1].mirror_digest()],
            workload_hash: self.cfg.workload_hash(),
            messages: self.messages,
            timing: self.timing,
        }
    }
}
