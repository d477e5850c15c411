use std::collections::{HashMap, VecDeque};

use rand::Rng;

use super::StoredKey;
use crate::ids::KeyId;

/// Hash table of keys with an auxiliary insertion-order index.
///
/// Lookup, insert and remove by id touch one hash entry. The order index is a
/// deque of `(id, stamp)` pairs; entries whose stamp no longer matches the
/// table are tombstones and are skipped lazily, so arbitrary removal stays
/// constant time while front-first selection remains deterministic.
#[derive(Debug, Clone, Default)]
pub(crate) struct KeyTable {
    entries: HashMap<KeyId, Slot>,
    order: VecDeque<(KeyId, u64)>,
    next_stamp: u64,
    bytes: usize,
}

#[derive(Debug, Clone)]
struct Slot {
    key: StoredKey,
    stamp: u64,
}

impl KeyTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bytes(&self) -> usize {
        self.bytes
    }

    pub fn contains(&self, id: &KeyId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn get(&self, id: &KeyId) -> Option<&StoredKey> {
        self.entries.get(id).map(|s| &s.key)
    }

    fn stamp(&mut self) -> u64 {
        self.next_stamp += 1;
        self.next_stamp
    }

    /// Inserts at the back of the order. Returns the key back if its id is taken.
    pub fn push_back(&mut self, key: StoredKey) -> Result<(), StoredKey> {
        if self.entries.contains_key(&key.id) {
            return Err(key);
        }
        let stamp = self.stamp();
        self.order.push_back((key.id, stamp));
        self.bytes += key.material.len();
        self.entries.insert(key.id, Slot { key, stamp });
        Ok(())
    }

    pub fn push_front(&mut self, key: StoredKey) -> Result<(), StoredKey> {
        if self.entries.contains_key(&key.id) {
            return Err(key);
        }
        let stamp = self.stamp();
        self.order.push_front((key.id, stamp));
        self.bytes += key.material.len();
        self.entries.insert(key.id, Slot { key, stamp });
        Ok(())
    }

    fn is_live(&self, id: &KeyId, stamp: u64) -> bool {
        self.entries.get(id).is_some_and(|s| s.stamp == stamp)
    }

    pub fn pop_front(&mut self) -> Option<StoredKey> {
        while let Some((id, stamp)) = self.order.pop_front() {
            if self.is_live(&id, stamp) {
                let slot = self.entries.remove(&id).expect("live entry");
                self.bytes -= slot.key.material.len();
                return Some(slot.key);
            }
        }
        None
    }

    pub fn remove(&mut self, id: &KeyId) -> Option<StoredKey> {
        let slot = self.entries.remove(id)?;
        self.bytes -= slot.key.material.len();
        self.maybe_compact();
        Some(slot.key)
    }

    /// Removes a uniformly chosen live key.
    pub fn remove_random<R: Rng>(&mut self, rng: &mut R) -> Option<StoredKey> {
        if self.entries.is_empty() {
            return None;
        }
        loop {
            let i = rng.gen_range(0..self.order.len());
            let (id, stamp) = self.order[i];
            if self.is_live(&id, stamp) {
                return self.remove(&id);
            }
        }
    }

    /// Live keys in order, front first.
    pub fn iter(&self) -> impl Iterator<Item = &StoredKey> + '_ {
        self.order.iter().filter_map(move |(id, stamp)| {
            self.entries
                .get(id)
                .filter(|s| s.stamp == *stamp)
                .map(|s| &s.key)
        })
    }

    fn maybe_compact(&mut self) {
        if self.order.len() > 2 * self.entries.len() + 64 {
            let entries = &self.entries;
            self.order
                .retain(|(id, stamp)| entries.get(id).is_some_and(|s| s.stamp == *stamp));
        }
    }
}
