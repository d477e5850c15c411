use std::collections::{BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uuid::Uuid;

use super::purpose::PurposeStore;
use super::{check_size_bits, KeystoreError, ReplayError, StoredKey, SupplyError, SupplyKey};
use crate::ids::{AppId, IdGenerator, KeyId};

/// Outcome of one fill, enough for the peer to cut identical elements.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FillReport {
    pub deque_id: Uuid,
    pub source_ids: Vec<KeyId>,
    pub element_ids: Vec<KeyId>,
}

impl FillReport {
    pub fn is_empty(&self) -> bool {
        self.source_ids.is_empty()
    }
}

/// Which elements a supply key was built from, in pop order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DequeSupplyRecord {
    pub uuid: Uuid,
    pub deque_id: Uuid,
    pub element_ids: Vec<KeyId>,
}

/// Application-shared deque of pre-formatted keys of one element size.
#[derive(Debug, Clone)]
pub struct DequeStore {
    deque_id: Uuid,
    element_size_bits: u32,
    elements: VecDeque<StoredKey>,
    subscribers: BTreeSet<AppId>,
    /// Source bytes not yet forming a whole element.
    staging: Vec<u8>,
}

impl DequeStore {
    pub fn new(deque_id: Uuid, element_size_bits: u32) -> Result<Self, KeystoreError> {
        check_size_bits(element_size_bits)?;
        Ok(Self {
            deque_id,
            element_size_bits,
            elements: VecDeque::new(),
            subscribers: BTreeSet::new(),
            staging: Vec::new(),
        })
    }

    pub fn deque_id(&self) -> Uuid {
        self.deque_id
    }

    pub fn element_size_bits(&self) -> u32 {
        self.element_size_bits
    }

    fn element_bytes(&self) -> usize {
        self.element_size_bits as usize / 8
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn staged_bytes(&self) -> usize {
        self.staging.len()
    }

    /// Bytes held in elements and staging.
    pub fn bytes(&self) -> usize {
        self.elements.len() * self.element_bytes() + self.staging.len()
    }

    pub fn subscribers(&self) -> &BTreeSet<AppId> {
        &self.subscribers
    }

    pub fn subscribe(&mut self, app: AppId) -> bool {
        self.subscribers.insert(app)
    }

    pub fn elements(&self) -> impl Iterator<Item = &StoredKey> + '_ {
        self.elements.iter()
    }

    fn cut_elements(&mut self, mut next_id: impl FnMut() -> KeyId) -> usize {
        let e = self.element_bytes();
        let whole = self.staging.len() / e;
        if whole == 0 {
            return 0;
        }
        let rest = self.staging.split_off(whole * e);
        let staged = std::mem::replace(&mut self.staging, rest);
        if whole == 1 {
            self.elements.push_back(StoredKey::available(next_id(), staged));
        } else {
            for chunk in staged.chunks_exact(e) {
                self.elements
                    .push_back(StoredKey::available(next_id(), chunk.to_vec()));
            }
        }
        whole
    }

    /// Pulls keys from `source` until at least `target` elements are queued
    /// or the source runs dry. Partial bytes stay staged for the next fill.
    pub fn fill(&mut self, source: &mut PurposeStore, target: usize, ids: &mut IdGenerator) -> FillReport {
        let mut report = FillReport {
            deque_id: self.deque_id,
            source_ids: Vec::new(),
            element_ids: Vec::new(),
        };
        if self.elements.len() >= target {
            return report;
        }
        let missing = (target - self.elements.len()) * self.element_bytes();
        let wanted = missing.saturating_sub(self.staging.len());
        let keys = wanted.div_ceil(source.default_key_size().max(1));
        for key in source.take_front(keys) {
            report.source_ids.push(key.id);
            if self.staging.is_empty() {
                self.staging = key.material;
            } else {
                self.staging.extend_from_slice(&key.material);
            }
        }
        let element_ids = &mut report.element_ids;
        self.cut_elements(|| {
            let id = ids.next_key_id();
            element_ids.push(id);
            id
        });
        report
    }

    /// Mirrors a fill performed by the peer.
    pub fn replay_fill(&mut self, source: &mut PurposeStore, report: &FillReport) -> Result<(), ReplayError> {
        let d = source.default_key_size();
        let produced = (self.staging.len() + report.source_ids.len() * d) / self.element_bytes();
        if produced != report.element_ids.len() {
            return Err(ReplayError::Malformed(format!(
                "fill yields {produced} elements, record lists {}",
                report.element_ids.len()
            )));
        }
        for key in source.take_ids(&report.source_ids)? {
            self.staging.extend_from_slice(&key.material);
        }
        let mut ids = report.element_ids.iter().copied();
        self.cut_elements(|| ids.next().expect("count checked"));
        Ok(())
    }

    /// Builds `count` keys of `size_bits`, each from `size_bits / element`
    /// elements popped front-first. All-or-nothing.
    pub fn supply(
        &mut self,
        size_bits: u32,
        count: usize,
        ids: &mut IdGenerator,
    ) -> Result<Vec<(SupplyKey, DequeSupplyRecord)>, SupplyError> {
        check_size_bits(size_bits)?;
        if size_bits % self.element_size_bits != 0 {
            return Err(KeystoreError::NotDivisible {
                requested: size_bits,
                element: self.element_size_bits,
            }
            .into());
        }
        let k = (size_bits / self.element_size_bits) as usize;
        if count == 0 || self.elements.len() < count * k {
            return Err(SupplyError::Unavailable);
        }
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let uuid = ids.next_uuid();
            let (material, element_ids) = self.pop_elements(k);
            out.push((
                SupplyKey { uuid, material },
                DequeSupplyRecord {
                    uuid,
                    deque_id: self.deque_id,
                    element_ids,
                },
            ));
        }
        Ok(out)
    }

    fn pop_elements(&mut self, k: usize) -> (Vec<u8>, Vec<KeyId>) {
        let first = self.elements.pop_front().expect("length checked");
        let mut element_ids = Vec::with_capacity(k);
        element_ids.push(first.id);
        if k == 1 {
            return (first.material, element_ids);
        }
        let mut material = Vec::with_capacity(k * first.material.len());
        material.extend_from_slice(&first.material);
        for _ in 1..k {
            let next = self.elements.pop_front().expect("length checked");
            element_ids.push(next.id);
            material.extend_from_slice(&next.material);
        }
        (material, element_ids)
    }

    /// Pops the same front elements the peer popped.
    pub fn replay_supply(&mut self, record: &DequeSupplyRecord) -> Result<SupplyKey, ReplayError> {
        if record.deque_id != self.deque_id {
            return Err(ReplayError::UnknownDeque(record.deque_id));
        }
        let k = record.element_ids.len();
        let front_matches = k > 0
            && self.elements.len() >= k
            && self.elements.iter().zip(&record.element_ids).all(|(e, id)| e.id == *id);
        if !front_matches {
            return Err(ReplayError::DequeFront);
        }
        let (material, _) = self.pop_elements(k);
        Ok(SupplyKey {
            uuid: record.uuid,
            material,
        })
    }

    /// Puts popped elements back at the front in their original order.
    pub fn restore_front(&mut self, record: &DequeSupplyRecord, material: &[u8]) {
        let e = self.element_bytes();
        for (id, chunk) in record.element_ids.iter().zip(material.chunks_exact(e)).rev() {
            self.elements.push_front(StoredKey::available(*id, chunk.to_vec()));
        }
    }

    pub(crate) fn digest_into(&self, h: &mut Sha256) {
        h.update(self.deque_id.as_bytes());
        h.update(self.element_size_bits.to_be_bytes());
        for e in &self.elements {
            h.update(e.id.to_bytes());
            h.update(&e.material);
        }
        h.update(b"staging");
        h.update(&self.staging);
    }
}

/// How a request will be served.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DequeSelection {
    Exact(Uuid),
    /// An existing deque whose element size divides the request.
    Divisor(Uuid),
    /// No deque fits; one of exactly the requested size must be created.
    Create,
}

impl DequeSelection {
    pub fn deque_id(self) -> Option<Uuid> {
        match self {
            DequeSelection::Exact(id) | DequeSelection::Divisor(id) => Some(id),
            DequeSelection::Create => None,
        }
    }
}

/// All deques of one key manager, in creation order.
#[derive(Debug, Clone, Default)]
pub struct DequeRegistry {
    deques: Vec<DequeStore>,
    index: HashMap<Uuid, usize>,
}

impl DequeRegistry {
    pub fn len(&self) -> usize {
        self.deques.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deques.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DequeStore> + '_ {
        self.deques.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut DequeStore> + '_ {
        self.deques.iter_mut()
    }

    pub fn get(&self, id: &Uuid) -> Option<&DequeStore> {
        self.index.get(id).map(|&i| &self.deques[i])
    }

    pub fn get_mut(&mut self, id: &Uuid) -> Option<&mut DequeStore> {
        self.index.get(id).map(|&i| &mut self.deques[i])
    }

    pub fn bytes(&self) -> usize {
        self.deques.iter().map(DequeStore::bytes).sum()
    }

    /// Exact match first, then the largest element size dividing the request.
    pub fn select(&self, size_bits: u32) -> Result<DequeSelection, KeystoreError> {
        check_size_bits(size_bits)?;
        let mut best: Option<&DequeStore> = None;
        for d in &self.deques {
            let e = d.element_size_bits;
            if e == size_bits {
                return Ok(DequeSelection::Exact(d.deque_id));
            }
            if size_bits % e == 0 && best.is_none_or(|b| e > b.element_size_bits) {
                best = Some(d);
            }
        }
        Ok(best.map_or(DequeSelection::Create, |d| DequeSelection::Divisor(d.deque_id)))
    }

    /// Registers a deque. Returns false if the id is already known.
    pub fn create(&mut self, deque_id: Uuid, element_size_bits: u32) -> Result<bool, KeystoreError> {
        if self.index.contains_key(&deque_id) {
            return Ok(false);
        }
        let store = DequeStore::new(deque_id, element_size_bits)?;
        self.index.insert(deque_id, self.deques.len());
        self.deques.push(store);
        Ok(true)
    }

    pub fn subscribe(&mut self, deque_id: &Uuid, app: AppId) -> bool {
        self.get_mut(deque_id).is_some_and(|d| d.subscribe(app))
    }

    pub(crate) fn digest_into(&self, h: &mut Sha256) {
        h.update(b"deques");
        for d in &self.deques {
            d.digest_into(h);
        }
    }
}
