use rand::Rng;
use serde::{Deserialize, Serialize};

use super::table::KeyTable;
use super::{KeystoreError, ReplayError, StoredKey};
use crate::ids::KeyId;

/// Running totals of what entered the common store and what was lost on the way.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestStats {
    pub ingested_bytes: u64,
    /// Trailing bytes shorter than one default-size block.
    pub waste_bytes: u64,
    pub overflow_keys: u64,
    pub overflow_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestReport {
    pub inserted: Vec<KeyId>,
    pub waste_bytes: usize,
    pub dropped_keys: usize,
}

/// Link-level reservoir of default-size keys (the Q-Buffer).
#[derive(Debug, Clone)]
pub struct CommonStore {
    table: KeyTable,
    default_key_size: usize,
    capacity: usize,
    stats: IngestStats,
}

impl CommonStore {
    pub fn new(default_key_size_bytes: usize, capacity_keys: usize) -> Result<Self, KeystoreError> {
        if default_key_size_bytes == 0 {
            return Err(KeystoreError::ZeroKeySize);
        }
        if capacity_keys == 0 {
            return Err(KeystoreError::ZeroCapacity);
        }
        Ok(Self {
            table: KeyTable::default(),
            default_key_size: default_key_size_bytes,
            capacity: capacity_keys,
            stats: IngestStats::default(),
        })
    }

    pub fn default_key_size(&self) -> usize {
        self.default_key_size
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn bytes(&self) -> usize {
        self.table.bytes()
    }

    pub fn stats(&self) -> IngestStats {
        self.stats
    }

    pub fn contains(&self, id: &KeyId) -> bool {
        self.table.contains(id)
    }

    /// Cuts a raw quantum-layer key into default-size blocks labelled with
    /// ids derived from `stream`.
    pub fn ingest(&mut self, raw: &[u8], stream: u64) -> Result<IngestReport, KeystoreError> {
        self.ingest_with(raw, |index| KeyId::derived(stream, index))
    }

    /// Like [`ingest`](Self::ingest) with caller-chosen ids. Blocks that do not
    /// fit under capacity are dropped whole and counted; the trailing partial
    /// block is discarded and counted as waste.
    pub fn ingest_with(
        &mut self,
        raw: &[u8],
        mut id_of: impl FnMut(u32) -> KeyId,
    ) -> Result<IngestReport, KeystoreError> {
        if raw.is_empty() {
            return Err(KeystoreError::EmptyRawKey);
        }
        let mut report = IngestReport {
            inserted: Vec::with_capacity(raw.len() / self.default_key_size),
            waste_bytes: raw.len() % self.default_key_size,
            dropped_keys: 0,
        };
        for (index, block) in raw.chunks_exact(self.default_key_size).enumerate() {
            if self.table.len() >= self.capacity {
                report.dropped_keys += 1;
                continue;
            }
            let key = StoredKey::available(id_of(index as u32), block.to_vec());
            let id = key.id;
            match self.table.push_back(key) {
                Ok(()) => report.inserted.push(id),
                Err(_) => report.dropped_keys += 1,
            }
        }
        self.stats.ingested_bytes += raw.len() as u64;
        self.stats.waste_bytes += report.waste_bytes as u64;
        self.stats.overflow_keys += report.dropped_keys as u64;
        self.stats.overflow_bytes += (report.dropped_keys * self.default_key_size) as u64;
        Ok(report)
    }

    /// Removes up to `count` keys front-first (insertion order). A shorter
    /// result means the store ran dry.
    pub fn take_front(&mut self, count: usize) -> Vec<StoredKey> {
        let mut out = Vec::with_capacity(count.min(self.table.len()));
        while out.len() < count {
            match self.table.pop_front() {
                Some(k) => out.push(k),
                None => break,
            }
        }
        out
    }

    /// Removes exactly the named keys, or nothing if any is missing.
    pub fn take_ids(&mut self, ids: &[KeyId]) -> Result<Vec<StoredKey>, ReplayError> {
        if let Some(missing) = ids.iter().find(|id| !self.table.contains(id)) {
            return Err(ReplayError::MissingKey(*missing));
        }
        Ok(ids
            .iter()
            .map(|id| self.table.remove(id).expect("checked above"))
            .collect())
    }

    pub fn missing_ids<'a>(&self, ids: &'a [KeyId]) -> Option<&'a KeyId> {
        ids.iter().find(|id| !self.table.contains(id))
    }

    /// Puts keys back at the front, preserving their relative order.
    pub fn restore_front(&mut self, keys: Vec<StoredKey>) {
        for key in keys.into_iter().rev() {
            let _ = self.table.push_front(key);
        }
    }

    /// Uncoordinated pick used by the single-common-store design.
    pub fn take_random<R: Rng>(&mut self, rng: &mut R) -> Option<StoredKey> {
        self.table.remove_random(rng)
    }

    pub fn remove(&mut self, id: &KeyId) -> Option<StoredKey> {
        self.table.remove(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &StoredKey> + '_ {
        self.table.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_division_has_no_waste() {
        let mut s = CommonStore::new(64, 100_000).unwrap();
        let r = s.ingest(&[7u8; 1024], 1).unwrap();
        assert_eq!(r.inserted.len(), 16);
        assert_eq!(r.waste_bytes, 0);
        assert!(s.iter().all(|k| k.size_bytes() == 64));
    }

    #[test]
    fn trailing_bytes_are_counted_as_waste() {
        let mut s = CommonStore::new(64, 100_000).unwrap();
        let r = s.ingest(&[1u8; 100], 1).unwrap();
        assert_eq!(r.inserted.len(), 1);
        assert_eq!(r.waste_bytes, 36);
        assert_eq!(s.stats().waste_bytes, 36);
    }

    #[test]
    fn overflow_matches_scalar_counter_oracle() {
        // Oracle: a plain counter of occupied slots.
        let capacity = 100_000usize;
        let mut occupied = 99_999usize;
        let (mut inserted, mut dropped) = (0, 0);
        for _ in 0..2048 / 64 {
            if occupied < capacity {
                occupied += 1;
                inserted += 1;
            } else {
                dropped += 1;
            }
        }
        assert_eq!((inserted, dropped), (1, 31));

        let mut s = CommonStore::new(64, capacity).unwrap();
        let filler = vec![0u8; 64 * 99_999];
        s.ingest(&filler, 1).unwrap();
        assert_eq!(s.len(), 99_999);
        let r = s.ingest(&[3u8; 2048], 2).unwrap();
        assert_eq!(r.inserted.len(), inserted);
        assert_eq!(r.dropped_keys, dropped);
        assert_eq!(s.len(), capacity);
        assert_eq!(s.stats().overflow_keys, 31);
    }

    #[test]
    fn empty_raw_key_is_rejected() {
        let mut s = CommonStore::new(64, 10).unwrap();
        assert_eq!(s.ingest(&[], 1), Err(KeystoreError::EmptyRawKey));
        assert!(CommonStore::new(0, 10).is_err());
        assert!(CommonStore::new(64, 0).is_err());
    }

    #[test]
    fn assignment_counts_and_exhaustion() {
        let mut s = CommonStore::new(64, 100).unwrap();
        s.ingest(&[0u8; 640], 1).unwrap();
        let moved = s.take_front(4);
        assert_eq!(moved.len(), 4);
        assert_eq!(s.len(), 6);

        let mut t = CommonStore::new(64, 100).unwrap();
        t.ingest(&[0u8; 192], 1).unwrap();
        assert_eq!(t.take_front(5).len(), 3);
        assert!(t.is_empty());
    }

    #[test]
    fn take_ids_is_all_or_nothing() {
        let mut s = CommonStore::new(8, 100).unwrap();
        let r = s.ingest(&[0u8; 32], 9).unwrap();
        let bogus = KeyId(42);
        assert_eq!(
            s.take_ids(&[r.inserted[0], bogus]),
            Err(ReplayError::MissingKey(bogus))
        );
        assert_eq!(s.len(), 4);
        let taken = s.take_ids(&r.inserted[1..3]).unwrap();
        assert_eq!(taken.len(), 2);
        s.restore_front(taken);
        let order: Vec<KeyId> = s.iter().map(|k| k.id).collect();
        assert_eq!(order, vec![r.inserted[1], r.inserted[2], r.inserted[0], r.inserted[3]]);
    }
}
