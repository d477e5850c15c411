use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uuid::Uuid;

use super::table::KeyTable;
use super::{check_size_bits, KeyState, Purpose, ReplayError, StoredKey, SupplyError, SupplyKey};
use crate::ids::{IdGenerator, KeyId};

/// One stored key consumed by a transformation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRef {
    pub id: KeyId,
    pub size_bytes: u32,
    /// Taken from the confirmed-remainder pool rather than the full-size keys.
    pub fragment: bool,
}

/// Everything the peer needs to rebuild a merged/split supply key: which
/// keys, in which order, and where the split falls.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub uuid: Uuid,
    pub sources: Vec<SourceRef>,
    /// Length of the supply key in bytes; bytes past it form the remainder.
    pub split_offset: u32,
    pub remainder_id: Option<KeyId>,
}

impl TransformRecord {
    pub fn pulled_bytes(&self) -> usize {
        self.sources.iter().map(|s| s.size_bytes as usize).sum()
    }

    pub fn remainder_bytes(&self) -> usize {
        self.pulled_bytes() - self.split_offset as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashSupply {
    pub keys: Vec<SupplyKey>,
    pub records: Vec<TransformRecord>,
}

/// Encryption or decryption working store (an S-Buffer) realized as a hash table.
///
/// Full-size keys come only from the common store. Remainders of splits wait
/// in `reserved_remainders` until the peer confirms the transformation, then
/// join a pool of fragments that serves requests no larger than themselves.
#[derive(Debug, Clone)]
pub struct PurposeStore {
    purpose: Purpose,
    default_key_size: usize,
    entries: KeyTable,
    fragments: BTreeMap<(usize, KeyId), StoredKey>,
    fragment_sizes: HashMap<KeyId, usize>,
    fragment_bytes: usize,
    reserved_remainders: HashMap<KeyId, StoredKey>,
    reserved_bytes: usize,
}

impl PurposeStore {
    pub fn new(purpose: Purpose, default_key_size_bytes: usize) -> Self {
        Self {
            purpose,
            default_key_size: default_key_size_bytes,
            entries: KeyTable::default(),
            fragments: BTreeMap::new(),
            fragment_sizes: HashMap::new(),
            fragment_bytes: 0,
            reserved_remainders: HashMap::new(),
            reserved_bytes: 0,
        }
    }

    pub fn purpose(&self) -> Purpose {
        self.purpose
    }

    pub fn default_key_size(&self) -> usize {
        self.default_key_size
    }

    /// Full-size keys available for supply.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty() && self.fragments.is_empty()
    }

    pub fn fragment_count(&self) -> usize {
        self.fragments.len()
    }

    pub fn reserved_count(&self) -> usize {
        self.reserved_remainders.len()
    }

    /// All bytes held, including fragments and reserved remainders.
    pub fn bytes(&self) -> usize {
        self.entries.bytes() + self.fragment_bytes + self.reserved_bytes
    }

    pub fn contains(&self, id: &KeyId) -> bool {
        self.entries.contains(id) || self.fragment_sizes.contains_key(id)
    }

    /// Accepts keys assigned from the common store, unchanged.
    pub fn assign(&mut self, keys: Vec<StoredKey>) -> Result<(), ReplayError> {
        if let Some(bad) = keys.iter().find(|k| k.size_bytes() != self.default_key_size) {
            return Err(ReplayError::SizeMismatch {
                id: bad.id,
                expected: self.default_key_size,
                actual: bad.size_bytes(),
            });
        }
        for key in keys {
            if let Err(k) = self.entries.push_back(key) {
                return Err(ReplayError::Malformed(format!("duplicate key {}", k.id)));
            }
        }
        Ok(())
    }

    pub fn take_front(&mut self, count: usize) -> Vec<StoredKey> {
        let mut out = Vec::with_capacity(count.min(self.entries.len()));
        while out.len() < count {
            match self.entries.pop_front() {
                Some(k) => out.push(k),
                None => break,
            }
        }
        out
    }

    pub fn pop_front(&mut self) -> Option<StoredKey> {
        self.entries.pop_front()
    }

    /// Removes exactly the named full-size keys, or nothing.
    pub fn take_ids(&mut self, ids: &[KeyId]) -> Result<Vec<StoredKey>, ReplayError> {
        if let Some(missing) = ids.iter().find(|id| !self.entries.contains(id)) {
            return Err(ReplayError::MissingKey(*missing));
        }
        Ok(ids
            .iter()
            .map(|id| self.entries.remove(id).expect("checked above"))
            .collect())
    }

    pub fn restore_front(&mut self, keys: Vec<StoredKey>) {
        for key in keys.into_iter().rev() {
            let _ = self.entries.push_front(key);
        }
    }

    fn insert_fragment(&mut self, mut key: StoredKey) {
        key.state = KeyState::Available;
        let size = key.size_bytes();
        self.fragment_bytes += size;
        self.fragment_sizes.insert(key.id, size);
        self.fragments.insert((size, key.id), key);
    }

    fn remove_fragment(&mut self, id: &KeyId) -> Option<StoredKey> {
        let size = self.fragment_sizes.remove(id)?;
        let key = self.fragments.remove(&(size, *id))?;
        self.fragment_bytes -= size;
        Some(key)
    }

    /// Smallest fragment holding at least `size` bytes.
    fn take_fitting_fragment(&mut self, size: usize) -> Option<StoredKey> {
        let (&(_, id), _) = self.fragments.range((size, KeyId(0))..).next()?;
        self.remove_fragment(&id)
    }

    fn reserve(&mut self, mut key: StoredKey) {
        key.state = KeyState::Reserved;
        self.reserved_bytes += key.size_bytes();
        self.reserved_remainders.insert(key.id, key);
    }

    fn unreserve(&mut self, id: &KeyId) -> Option<StoredKey> {
        let key = self.reserved_remainders.remove(id)?;
        self.reserved_bytes -= key.size_bytes();
        Some(key)
    }

    /// Builds `count` supply keys of `size_bits` by merging and splitting
    /// stored keys. All-or-nothing: either every key is built or the store is
    /// left untouched.
    pub fn supply(
        &mut self,
        size_bits: u32,
        count: usize,
        ids: &mut IdGenerator,
    ) -> Result<HashSupply, SupplyError> {
        let size = check_size_bits(size_bits)?;
        let d = self.default_key_size;
        let per_key = size.div_ceil(d);
        let feasible = if size <= d {
            let fitting = self.fragments.range((size, KeyId(0))..).take(count).count();
            fitting + self.entries.len() >= count
        } else {
            self.entries.len() >= count * per_key
        };
        if count == 0 || !feasible {
            return Err(SupplyError::Unavailable);
        }

        let mut keys = Vec::with_capacity(count);
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let uuid = ids.next_uuid();
            let fragment = if size <= d {
                self.take_fitting_fragment(size)
            } else {
                None
            };
            let (mut material, sources) = match fragment {
                Some(frag) => {
                    let src = SourceRef {
                        id: frag.id,
                        size_bytes: frag.size_bytes() as u32,
                        fragment: true,
                    };
                    (frag.material, vec![src])
                }
                None if per_key == 1 => {
                    let key = self.entries.pop_front().expect("feasibility checked");
                    let src = SourceRef {
                        id: key.id,
                        size_bytes: d as u32,
                        fragment: false,
                    };
                    (key.material, vec![src])
                }
                None => {
                    let mut material = Vec::with_capacity(per_key * d);
                    let mut sources = Vec::with_capacity(per_key);
                    for _ in 0..per_key {
                        let key = self.entries.pop_front().expect("feasibility checked");
                        sources.push(SourceRef {
                            id: key.id,
                            size_bytes: d as u32,
                            fragment: false,
                        });
                        material.extend_from_slice(&key.material);
                    }
                    (material, sources)
                }
            };
            let remainder_id = if material.len() > size {
                let rest = material.split_off(size);
                let id = ids.next_key_id();
                self.reserve(StoredKey::available(id, rest));
                Some(id)
            } else {
                None
            };
            keys.push(SupplyKey { uuid, material });
            records.push(TransformRecord {
                uuid,
                sources,
                split_offset: size as u32,
                remainder_id,
            });
        }
        Ok(HashSupply { keys, records })
    }

    /// Rebuilds the supply key described by `record` from this store's copy
    /// of the same keys. Validates before mutating.
    pub fn replay(&mut self, record: &TransformRecord) -> Result<SupplyKey, ReplayError> {
        let mut total = 0usize;
        for src in &record.sources {
            let actual = if src.fragment {
                self.fragment_sizes.get(&src.id).copied()
            } else {
                self.entries.get(&src.id).map(|k| k.size_bytes())
            }
            .ok_or(ReplayError::MissingKey(src.id))?;
            if actual != src.size_bytes as usize {
                return Err(ReplayError::SizeMismatch {
                    id: src.id,
                    expected: src.size_bytes as usize,
                    actual,
                });
            }
            total += actual;
        }
        let split = record.split_offset as usize;
        if split == 0 || total < split || (total > split) != record.remainder_id.is_some() {
            return Err(ReplayError::Malformed(format!(
                "{total} source bytes cannot split at {split}"
            )));
        }
        if let Some(rid) = record.remainder_id {
            if self.reserved_remainders.contains_key(&rid) || self.contains(&rid) {
                return Err(ReplayError::Malformed(format!("remainder id {rid} in use")));
            }
        }

        let mut material = Vec::with_capacity(total);
        for src in &record.sources {
            let key = if src.fragment {
                self.remove_fragment(&src.id)
            } else {
                self.entries.remove(&src.id)
            }
            .expect("validated above");
            material.extend_from_slice(&key.material);
        }
        if let Some(rid) = record.remainder_id {
            let rest = material.split_off(split);
            self.reserve(StoredKey::available(rid, rest));
        }
        Ok(SupplyKey {
            uuid: record.uuid,
            material,
        })
    }

    /// The peer confirmed the transformation: the remainder becomes available.
    pub fn confirm_remainder(&mut self, id: &KeyId) -> bool {
        match self.unreserve(id) {
            Some(key) => {
                self.insert_fragment(key);
                true
            }
            None => false,
        }
    }

    /// Drops a reserved remainder, returning its size for waste accounting.
    pub fn discard_remainder(&mut self, id: &KeyId) -> Option<usize> {
        self.unreserve(id).map(|k| k.size_bytes())
    }

    /// Undoes a local supply: the sources reappear in their original positions
    /// and the reserved remainder is withdrawn.
    pub fn rollback(&mut self, record: &TransformRecord, supplied: Vec<u8>) {
        let mut bytes = supplied;
        if let Some(rid) = record.remainder_id {
            if let Some(rest) = self.unreserve(&rid) {
                bytes.extend_from_slice(&rest.material);
            }
        }
        let mut offset = 0;
        let mut full = Vec::new();
        for src in &record.sources {
            let end = offset + src.size_bytes as usize;
            let key = StoredKey::available(src.id, bytes[offset..end].to_vec());
            offset = end;
            if src.fragment {
                self.insert_fragment(key);
            } else {
                full.push(key);
            }
        }
        self.restore_front(full);
    }

    pub(crate) fn digest_into(&self, h: &mut Sha256) {
        h.update(b"purpose");
        h.update((self.default_key_size as u64).to_be_bytes());
        for key in self.entries.iter() {
            h.update(key.id.to_bytes());
            h.update(&key.material);
        }
        h.update(b"fragments");
        for key in self.fragments.values() {
            h.update(key.id.to_bytes());
            h.update(&key.material);
        }
        h.update(b"reserved");
        let mut reserved: Vec<&StoredKey> = self.reserved_remainders.values().collect();
        reserved.sort_by_key(|k| k.id);
        for key in reserved {
            h.update(key.id.to_bytes());
            h.update(&key.material);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(n: usize, d: usize) -> PurposeStore {
        let mut s = PurposeStore::new(Purpose::Encryption, d);
        let keys = (0..n)
            .map(|i| StoredKey::available(KeyId(i as u128 + 1), vec![i as u8; d]))
            .collect();
        s.assign(keys).unwrap();
        s
    }

    /// Oracle: concatenate the first `n` keys' material and cut at `size`.
    fn concat_oracle(s: &PurposeStore, n: usize, size: usize) -> (Vec<u8>, Vec<u8>) {
        let all: Vec<u8> = s.entries.iter().take(n).flat_map(|k| k.material.clone()).collect();
        (all[..size].to_vec(), all[size..].to_vec())
    }

    #[test]
    fn identity_size_pulls_one_key_without_split() {
        let mut s = store_with(4, 64);
        let mut ids = IdGenerator::from_seed(1);
        let out = s.supply(512, 1, &mut ids).unwrap();
        assert_eq!(out.records[0].sources.len(), 1);
        assert_eq!(out.records[0].remainder_id, None);
        assert_eq!(out.keys[0].size_bits(), 512);
        assert_eq!(s.len(), 3);
        assert_eq!(s.reserved_count(), 0);
    }

    #[test]
    fn merge_then_split_matches_concatenation_oracle() {
        let mut s = store_with(4, 64);
        let (expect_key, expect_rest) = concat_oracle(&s, 2, 100);
        let mut ids = IdGenerator::from_seed(1);
        let out = s.supply(800, 1, &mut ids).unwrap();
        let rec = &out.records[0];
        assert_eq!(rec.sources.len(), 2);
        assert_eq!(rec.split_offset, 100);
        assert_eq!(out.keys[0].material, expect_key);
        assert_eq!(rec.remainder_bytes(), 28);
        let rid = rec.remainder_id.unwrap();
        assert_eq!(s.reserved_remainders[&rid].material, expect_rest);
        assert_eq!(s.reserved_remainders[&rid].state, KeyState::Reserved);
    }

    #[test]
    fn two_half_size_keys_merge_into_one() {
        let mut s = store_with(4, 32);
        let mut ids = IdGenerator::from_seed(1);
        let out = s.supply(512, 1, &mut ids).unwrap();
        assert_eq!(out.records[0].sources.len(), 2);
        assert_eq!(out.records[0].remainder_id, None);
    }

    #[test]
    fn reserved_remainder_is_not_supplied_until_confirmed() {
        let mut s = store_with(1, 64);
        let mut ids = IdGenerator::from_seed(1);
        let out = s.supply(256, 1, &mut ids).unwrap();
        let rid = out.records[0].remainder_id.unwrap();
        assert_eq!(s.supply(256, 1, &mut ids), Err(SupplyError::Unavailable));
        assert!(s.confirm_remainder(&rid));
        let again = s.supply(256, 1, &mut ids).unwrap();
        assert_eq!(again.records[0].sources[0].id, rid);
        assert!(again.records[0].sources[0].fragment);
        assert_eq!(again.records[0].remainder_id, None);
    }

    #[test]
    fn insufficient_material_leaves_store_untouched() {
        let mut s = store_with(3, 64);
        let mut ids = IdGenerator::from_seed(1);
        assert_eq!(s.supply(1024, 2, &mut ids), Err(SupplyError::Unavailable));
        assert_eq!(s.len(), 3);
        assert!(matches!(s.supply(12, 1, &mut ids), Err(SupplyError::Invalid(_))));
    }

    #[test]
    fn replay_reproduces_bytes_and_rollback_restores_positions() {
        let mut a = store_with(6, 64);
        let mut b = a.clone();
        let before: Vec<KeyId> = a.entries.iter().map(|k| k.id).collect();
        let mut ids = IdGenerator::from_seed(3);
        let out = a.supply(1000, 2, &mut ids).unwrap();
        for (key, rec) in out.keys.iter().zip(&out.records) {
            assert_eq!(&b.replay(rec).unwrap(), key);
        }
        for (key, rec) in out.keys.into_iter().zip(&out.records).rev() {
            a.rollback(rec, key.material);
        }
        let after: Vec<KeyId> = a.entries.iter().map(|k| k.id).collect();
        assert_eq!(before, after);
        assert_eq!(a.bytes(), 6 * 64);
        assert_eq!(a.reserved_count(), 0);
    }

    #[test]
    fn replay_of_consumed_key_fails_without_mutation() {
        let mut a = store_with(2, 64);
        let mut b = a.clone();
        let mut ids = IdGenerator::from_seed(3);
        let out = a.supply(512, 1, &mut ids).unwrap();
        b.take_ids(&[out.records[0].sources[0].id]).unwrap();
        let bytes = b.bytes();
        assert!(matches!(b.replay(&out.records[0]), Err(ReplayError::MissingKey(_))));
        assert_eq!(b.bytes(), bytes);
    }
}
