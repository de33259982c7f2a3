//! Named root objects and offset references.
//!
//! The object table maps short keys to offsets of root structures. Buckets
//! are two lines: `[state, hash, value, key_len]` then the key bytes. Probing
//! is linear; deletion leaves a tombstone so no other bucket is rewritten.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh64::xxh64;

use crate::interlock::LockError;
use crate::memory::{MemError, MemResult, NodeView, LINE_SIZE};
use crate::shm::ShmNode;

pub const MAX_KEY_LEN: usize = LINE_SIZE as usize;

const EMPTY: u64 = 0;
const OCCUPIED: u64 = 1;
const TOMBSTONE: u64 = 2;

/// A position in the shared region, as a byte offset from its start.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ShmRef(pub u64);

impl ShmRef {
    pub const NULL: ShmRef = ShmRef(u64::MAX);

    pub fn is_null(self) -> bool {
        self == Self::NULL
    }

    pub fn offset(self) -> Option<u64> {
        (!self.is_null()).then_some(self.0)
    }

    /// This node's simulated address for the reference.
    pub fn to_address(self, view: &NodeView) -> MemResult<u64> {
        view.to_address(self.0)
    }

    pub fn from_address(view: &NodeView, address: u64) -> MemResult<Self> {
        view.to_offset(address).map(ShmRef)
    }
}

impl fmt::Debug for ShmRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_null() {
            f.write_str("ShmRef(NULL)")
        } else {
            write!(f, "ShmRef({:#x})", self.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ObjectError {
    #[error("key must be 1..={MAX_KEY_LEN} bytes, got {0}")]
    KeyLength(usize),
    #[error("value must be a line-aligned non-null offset")]
    BadValue,
    #[error("key already published")]
    Duplicate,
    #[error("object table full")]
    Full,
    #[error("key not found")]
    NotFound,
    #[error(transparent)]
    Lock(#[from] LockError),
    #[error(transparent)]
    Mem(#[from] MemError),
}

pub fn key_hash(key: &[u8]) -> u64 {
    xxh64(key, 0)
}

/// Bucket index a key's probe sequence starts from.
pub fn home_bucket(key: &[u8], buckets: u32) -> u32 {
    (key_hash(key) % buckets as u64) as u32
}

/// Matching bucket and value, then the first reusable bucket.
type Probe = (Option<(u32, u64)>, Option<u32>);

struct Bucket {
    state: u64,
    hash: u64,
    value: u64,
    key: Vec<u8>,
}

impl ShmNode {
    fn read_bucket(&self, i: u32) -> MemResult<Bucket> {
        let off = self.shm.layout.object_bucket(i);
        let mut b = [0u8; 2 * LINE_SIZE as usize];
        self.view.load_fresh(off, &mut b)?;
        let w = |i: usize| u64::from_le_bytes(b[i * 8..i * 8 + 8].try_into().unwrap());
        let len = (w(3) as usize).min(MAX_KEY_LEN);
        Ok(Bucket { state: w(0), hash: w(1), value: w(2), key: b[64..64 + len].to_vec() })
    }

    fn check_key(key: &str) -> Result<&[u8], ObjectError> {
        let k = key.as_bytes();
        if k.is_empty() || k.len() > MAX_KEY_LEN {
            return Err(ObjectError::KeyLength(k.len()));
        }
        Ok(k)
    }

    /// Probe for `key`. Returns the matching bucket, if any, and the first
    /// reusable bucket seen on the way.
    fn probe(&self, key: &[u8]) -> MemResult<Probe> {
        let n = self.shm.layout.object_buckets;
        let h = key_hash(key);
        let start = (h % n as u64) as u32;
        let mut reusable = None;
        for k in 0..n {
            let i = (start + k) % n;
            let b = self.read_bucket(i)?;
            match b.state {
                EMPTY => return Ok((None, reusable.or(Some(i)))),
                OCCUPIED if b.hash == h && b.key == key => return Ok((Some((i, b.value)), reusable)),
                TOMBSTONE => {
                    reusable.get_or_insert(i);
                }
                _ => {}
            }
        }
        Ok((None, reusable))
    }

    /// Publish `value` under `key`.
    pub fn put(&self, key: &str, value: ShmRef) -> Result<(), ObjectError> {
        let k = Self::check_key(key)?;
        if value.is_null() || !value.0.is_multiple_of(LINE_SIZE) || value.0 >= self.shm.layout.capacity {
            return Err(ObjectError::BadValue);
        }
        let _g = self.lock_id(self.shm.layout.object_lock())?;
        let (found, slot) = self.probe(k)?;
        if found.is_some() {
            return Err(ObjectError::Duplicate);
        }
        let i = slot.ok_or(ObjectError::Full)?;
        let off = self.shm.layout.object_bucket(i);
        let mut key_line = [0u8; LINE_SIZE as usize];
        key_line[..k.len()].copy_from_slice(k);
        self.view.store_through(off + LINE_SIZE, &key_line)?;
        let words = [OCCUPIED, key_hash(k), value.0, k.len() as u64];
        let head: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
        self.view.store_through(off, &head)?;
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<ShmRef, ObjectError> {
        let k = Self::check_key(key)?;
        let _g = self.lock_id(self.shm.layout.object_lock())?;
        match self.probe(k)?.0 {
            Some((_, v)) => Ok(ShmRef(v)),
            None => Err(ObjectError::NotFound),
        }
    }

    /// Remove `key`. The referenced object is left alone.
    pub fn destroy(&self, key: &str) -> Result<(), ObjectError> {
        let k = Self::check_key(key)?;
        let _g = self.lock_id(self.shm.layout.object_lock())?;
        let (i, _) = self.probe(k)?.0.ok_or(ObjectError::NotFound)?;
        self.view.store_through_u64(self.shm.layout.object_bucket(i), TOMBSTONE)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::NodeId;
    use crate::shm::{Shm, ShmConfig};
    use std::sync::Arc;

    fn shm(buckets: u32) -> Arc<Shm> {
        Shm::create(ShmConfig {
            capacity: 4 << 20,
            nodes: 2,
            lock_entries: 2,
            object_buckets: buckets,
            chunk_size: 64 << 10,
            remote_ring_slots: 8,
            ..ShmConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn cross_node_publication() {
        let s = shm(16);
        let n0 = s.join(NodeId(0)).unwrap();
        let n1 = s.join(NodeId(1)).unwrap();
        n0.put("prefix_index", ShmRef(0x20_0000)).unwrap();
        assert_eq!(n1.get("prefix_index"), Ok(ShmRef(0x20_0000)));
        assert_eq!(n1.put("prefix_index", ShmRef(0x20_0040)), Err(ObjectError::Duplicate));
        assert_eq!(n1.get("absent"), Err(ObjectError::NotFound));
    }

    #[test]
    fn destroy_and_reuse() {
        let s = shm(16);
        let n = s.join(NodeId(0)).unwrap();
        n.put("a", ShmRef(0x1000)).unwrap();
        n.destroy("a").unwrap();
        assert_eq!(n.get("a"), Err(ObjectError::NotFound));
        assert_eq!(n.destroy("a"), Err(ObjectError::NotFound));
        n.put("a", ShmRef(0x2000)).unwrap();
        assert_eq!(n.get("a"), Ok(ShmRef(0x2000)));
    }

    #[test]
    fn table_capacity() {
        let s = shm(1024);
        let n = s.join(NodeId(1)).unwrap();
        for i in 0..1024 {
            n.put(&format!("k{i}"), ShmRef(64 * (i + 1))).unwrap();
        }
        assert_eq!(n.put("k1024", ShmRef(64)), Err(ObjectError::Full));
        assert_eq!(n.get("k77"), Ok(ShmRef(64 * 78)));
    }

    #[test]
    fn colliding_keys_are_both_found() {
        let s = shm(16);
        let n = s.join(NodeId(0)).unwrap();
        let target = home_bucket(b"seed", 16);
        let other = (0..)
            .map(|i| format!("key{i}"))
            .find(|k| home_bucket(k.as_bytes(), 16) == target)
            .unwrap();
        n.put("seed", ShmRef(0x100)).unwrap();
        n.put(&other, ShmRef(0x200)).unwrap();
        assert_eq!(n.get("seed"), Ok(ShmRef(0x100)));
        assert_eq!(n.get(&other), Ok(ShmRef(0x200)));
        // Removing the first keeps the second reachable past the tombstone.
        n.destroy("seed").unwrap();
        assert_eq!(n.get(&other), Ok(ShmRef(0x200)));
    }

    #[test]
    fn argument_validation() {
        let s = shm(16);
        let n = s.join(NodeId(0)).unwrap();
        assert_eq!(n.put("", ShmRef(64)), Err(ObjectError::KeyLength(0)));
        assert!(n.put(&"x".repeat(65), ShmRef(64)).is_err());
        n.put(&"x".repeat(64), ShmRef(64)).unwrap();
        assert_eq!(n.put("b", ShmRef::NULL), Err(ObjectError::BadValue));
        assert_eq!(n.put("b", ShmRef(65)), Err(ObjectError::BadValue));
    }

    #[test]
    fn translation() {
        let s = shm(16);
        let v = s.join(NodeId(1)).unwrap().view().clone();
        assert_eq!(ShmRef(0).to_address(&v).unwrap(), v.base());
        for x in [1u64, 4096, (4 << 20) - 1] {
            let a = ShmRef(x).to_address(&v).unwrap();
            assert_eq!(ShmRef::from_address(&v, a).unwrap(), ShmRef(x));
        }
        assert!(ShmRef(4 << 20).to_address(&v).is_err());
        assert!(ShmRef::from_address(&v, v.base() - 1).is_err());
    }
}
