use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_size_bits, Purpose, ReplayError, SupplyError, SupplyKey};
use crate::ids::IdGenerator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueuedByte {
    pub seq: u64,
    pub value: u8,
}

/// Inclusive range of byte sequence ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeqRange {
    pub first: u64,
    pub last: u64,
}

impl SeqRange {
    pub fn len(&self) -> u64 {
        (self.last + 1).saturating_sub(self.first)
    }

    pub fn is_empty(&self) -> bool {
        self.last < self.first
    }
}

/// Purpose store holding single bytes, each labelled with a sequence id.
#[derive(Debug, Clone)]
pub struct ByteQueueStore {
    purpose: Purpose,
    bytes: VecDeque<QueuedByte>,
    next_seq: u64,
}

impl ByteQueueStore {
    pub fn new(purpose: Purpose, first_seq: u64) -> Self {
        Self {
            purpose,
            bytes: VecDeque::new(),
            next_seq: first_seq,
        }
    }

    pub fn purpose(&self) -> Purpose {
        self.purpose
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn head_seq(&self) -> Option<u64> {
        self.bytes.front().map(|b| b.seq)
    }

    /// Sequence id the next pushed byte will get.
    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Appends `material` byte by byte; returns the assigned range.
    pub fn push(&mut self, material: &[u8]) -> Option<SeqRange> {
        if material.is_empty() {
            return None;
        }
        let first = self.next_seq;
        for &value in material {
            self.bytes.push_back(QueuedByte {
                seq: self.next_seq,
                value,
            });
            self.next_seq += 1;
        }
        Some(SeqRange {
            first,
            last: self.next_seq - 1,
        })
    }

    fn pop_bytes(&mut self, n: usize) -> (Vec<u8>, SeqRange) {
        let mut material = Vec::with_capacity(n);
        let first = self.bytes.front().expect("caller checked length").seq;
        let mut last = first;
        for i in 0..n {
            let b = self.bytes.pop_front().expect("caller checked length");
            debug_assert_eq!(b.seq, first + i as u64, "queue sequence ids must be contiguous");
            last = b.seq;
            material.push(b.value);
        }
        (material, SeqRange { first, last })
    }

    /// Extracts `count` keys of `size_bits` each, front-first.
    pub fn supply(
        &mut self,
        size_bits: u32,
        count: usize,
        ids: &mut IdGenerator,
    ) -> Result<Vec<(SupplyKey, SeqRange)>, SupplyError> {
        let size = check_size_bits(size_bits)?;
        if count == 0 || self.bytes.len() < count * size {
            return Err(SupplyError::Unavailable);
        }
        Ok((0..count)
            .map(|_| {
                let (material, range) = self.pop_bytes(size);
                let key = SupplyKey {
                    uuid: ids.next_uuid(),
                    material,
                };
                (key, range)
            })
            .collect())
    }

    /// Pops the bytes named by `range`, which must start at the head.
    pub fn replay(&mut self, range: SeqRange) -> Result<Vec<u8>, ReplayError> {
        let head = self.head_seq();
        if head != Some(range.first) {
            return Err(ReplayError::SeqMismatch {
                expected: range.first,
                actual: head,
            });
        }
        if range.last < range.first || (self.bytes.len() as u64) < range.len() {
            return Err(ReplayError::Malformed(format!(
                "range {}..={} exceeds queue",
                range.first, range.last
            )));
        }
        Ok(self.pop_bytes(range.len() as usize).0)
    }

    /// Puts popped bytes back at the head. `first` is the seq of `material[0]`.
    pub fn restore_front(&mut self, first: u64, material: &[u8]) {
        for (i, &value) in material.iter().enumerate().rev() {
            self.bytes.push_front(QueuedByte {
                seq: first + i as u64,
                value,
            });
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &QueuedByte> + '_ {
        self.bytes.iter()
    }

    pub(crate) fn digest_into(&self, h: &mut Sha256) {
        h.update(b"queue");
        h.update(self.next_seq.to_be_bytes());
        if let Some(head) = self.head_seq() {
            h.update(head.to_be_bytes());
        }
        let (a, b) = self.bytes.as_slices();
        for part in [a, b] {
            let values: Vec<u8> = part.iter().map(|q| q.value).collect();
            h.update(&values);
        }
    }
}
