//! Rack-wide prefix cache index.
//!
//! Blocks of a prompt are named by chained hashes, so a block's name depends
//! on every token before it. The index is a fixed linear-probed table whose
//! buckets point at entries. An entry is two lines: a cold line written once
//! at insert, and a hot line with the pin count, state and LRU links. KV
//! payloads live in DMA-only allocations and are never touched by CPU loads.
//!
//! An entry is PENDING from insert until its payload DMA completes; then the
//! inserter publishes it READY and appends it to the LRU list. Readers treat
//! PENDING as a miss. The list holds READY entries only, oldest first;
//! eviction takes the oldest entry with no pins.
//!
//! Every operation runs under the index's inter-node lock. Lock order is
//! index, then bitmap, then remote ring.
//!
//! Root layout, one line each:
//!
//! ```text
//! descriptor [magic, buckets, lock_id, tokens_per_block, bytes_per_token]
//! anchors    [lru_head, lru_tail, live_count]
//! bucket i   [state, hash, entry]
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh64::Xxh64;

use crate::allocator::AllocError;
use crate::interlock::{LockError, LockHandle};
use crate::memory::{DmaCompletion, FlushDiscipline, MemError, LINE_SIZE};
use crate::objectstore::{ObjectError, ShmRef};
use crate::shm::ShmNode;

/// Seed of every hash chain.
pub const CHAIN_SEED: u64 = 0;

const ROOT_MAGIC: u64 = 0x5052_4546_4958_4958;
const NULL: u64 = u64::MAX;

const B_EMPTY: u64 = 0;
const B_OCCUPIED: u64 = 1;
const B_TOMBSTONE: u64 = 2;

// Cold line.
const E_HASH: u64 = 0;
const E_TOKENS: u64 = 8;
const E_KV_REF: u64 = 16;
const E_KV_SIZE: u64 = 24;
const E_BUCKET: u64 = 32;
// Hot line.
const E_REF: u64 = LINE_SIZE;
const E_STATE: u64 = LINE_SIZE + 8;
const E_PREV: u64 = LINE_SIZE + 16;
const E_NEXT: u64 = LINE_SIZE + 24;
pub const ENTRY_BYTES: u64 = 2 * LINE_SIZE;

const A_HEAD: u64 = LINE_SIZE;
const A_TAIL: u64 = LINE_SIZE + 8;
const A_LIVE: u64 = LINE_SIZE + 16;
const BUCKETS_AT: u64 = 2 * LINE_SIZE;

/// Hash of one block given its predecessor's hash: xxh64 with seed 0 over
/// `prev` then each token id, all little-endian.
pub fn chain_hash(prev: u64, tokens: &[u32]) -> Result<u64, PrefixError> {
    if tokens.is_empty() {
        return Err(PrefixError::EmptyBlock);
    }
    let mut h = Xxh64::new(0);
    h.update(&prev.to_le_bytes());
    for t in tokens {
        h.update(&t.to_le_bytes());
    }
    Ok(h.digest())
}

/// Chained hashes of every block of `tokens`, the last one possibly partial.
pub fn block_hashes(tokens: &[u32], tokens_per_block: usize) -> Vec<u64> {
    let mut prev = CHAIN_SEED;
    tokens
        .chunks(tokens_per_block)
        .map(|b| {
            prev = chain_hash(prev, b).expect("chunks are non-empty");
            prev
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvBlockSpec {
    pub tokens_per_block: u32,
    pub bytes_per_token: u64,
}

impl Default for KvBlockSpec {
    fn default() -> Self {
        Self { tokens_per_block: 64, bytes_per_token: 131_072 }
    }
}

impl KvBlockSpec {
    pub fn kv_size(&self, token_count: u32) -> u64 {
        token_count as u64 * self.bytes_per_token
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EntryState {
    Invalid,
    Pending,
    Ready,
}

impl EntryState {
    fn encode(self) -> u64 {
        match self {
            EntryState::Invalid => 0,
            EntryState::Pending => 1,
            EntryState::Ready => 2,
        }
    }

    fn decode(v: u64) -> Self {
        match v {
            1 => EntryState::Pending,
            2 => EntryState::Ready,
            _ => EntryState::Invalid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PrefixError {
    #[error("a block needs at least one token")]
    EmptyBlock,
    #[error("block of {0} tokens exceeds the block size")]
    BlockTooLong(u32),
    #[error("hash {0:#018x} is already in the index")]
    Duplicate(u64),
    #[error("index full and every entry is pinned")]
    IndexFull,
    #[error("entry is not pending")]
    NotPending,
    #[error("payload DMA has not completed")]
    DmaIncomplete,
    #[error("unpin of an entry with no pins")]
    UnpinUnderflow,
    #[error("no prefix index at the published root")]
    BadRoot,
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Object(#[from] ObjectError),
    #[error(transparent)]
    Lock(#[from] LockError),
    #[error(transparent)]
    Mem(#[from] MemError),
}

pub type PrefixResult<T> = Result<T, PrefixError>;

/// Reference to an entry in the shared region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntryRef(pub ShmRef);

/// A freshly claimed, not yet published entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pending {
    pub entry: EntryRef,
    pub kv_ref: ShmRef,
    pub kv_size: u64,
}

/// Result of a lookup: the first `hit_len` blocks, each now pinned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lookup {
    pub hit_len: usize,
    pub entries: Vec<EntryRef>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EntryInfo {
    pub entry: EntryRef,
    pub hash: u64,
    pub token_count: u32,
    pub kv_ref: ShmRef,
    pub kv_size: u64,
    pub bucket: u32,
    pub ref_count: u64,
    pub state: EntryState,
}

#[derive(Clone, Debug, Serialize)]
pub struct IndexDump {
    pub root: ShmRef,
    pub buckets: u32,
    pub occupied: u32,
    pub tombstones: u32,
    pub live_count: u64,
    /// READY entries, least recently used first.
    pub lru: Vec<EntryInfo>,
    pub pending: Vec<EntryInfo>,
}

/// Handle to a prefix index. Cheap to clone; holds only offsets and config.
#[derive(Clone, Debug)]
pub struct PrefixIndex {
    root: ShmRef,
    buckets: u32,
    lock: LockHandle,
    spec: KvBlockSpec,
    /// How metadata lines are flushed and invalidated around each access.
    pub discipline: FlushDiscipline,
}

impl PrefixIndex {
    /// Allocate, format and publish a new index under `name`.
    pub fn create(node: &ShmNode, name: &str, buckets: u32, spec: KvBlockSpec) -> PrefixResult<Self> {
        if buckets == 0 || spec.tokens_per_block == 0 || spec.bytes_per_token == 0 {
            return Err(PrefixError::BadRoot);
        }
        let lock = node.allocate_lock()?;
        let bytes = BUCKETS_AT + buckets as u64 * LINE_SIZE;
        let root = node.shmalloc(bytes)?;
        // Recycled memory may hold anything; every bucket must start EMPTY.
        let zeros = vec![0u8; 64 * LINE_SIZE as usize];
        let mut at = root + LINE_SIZE;
        while at < root + bytes {
            let n = (root + bytes - at).min(zeros.len() as u64) as usize;
            node.view().store_through(at, &zeros[..n])?;
            at += n as u64;
        }
        let idx = Self { root: ShmRef(root), buckets, lock, spec, discipline: FlushDiscipline::Clflush };
        idx.wr(node, A_HEAD, NULL)?;
        idx.wr(node, A_TAIL, NULL)?;
        let desc = [ROOT_MAGIC, buckets as u64, lock.id() as u64, spec.tokens_per_block as u64, spec.bytes_per_token];
        let bytes: Vec<u8> = desc.iter().flat_map(|w| w.to_le_bytes()).collect();
        node.view().store_through(root, &bytes)?;
        node.put(name, ShmRef(root))?;
        Ok(idx)
    }

    /// Attach to an index another node published.
    pub fn open(node: &ShmNode, name: &str) -> PrefixResult<Self> {
        let root = node.get(name)?;
        let mut b = [0u8; 40];
        node.view().load_fresh(root.0, &mut b)?;
        let w = |i: usize| u64::from_le_bytes(b[i * 8..i * 8 + 8].try_into().unwrap());
        if w(0) != ROOT_MAGIC {
            return Err(PrefixError::BadRoot);
        }
        Ok(Self {
            root,
            buckets: w(1) as u32,
            lock: LockHandle::from_id(w(2) as u32),
            spec: KvBlockSpec { tokens_per_block: w(3) as u32, bytes_per_token: w(4) },
            discipline: FlushDiscipline::Clflush,
        })
    }

    pub fn root(&self) -> ShmRef {
        self.root
    }

    pub fn buckets(&self) -> u32 {
        self.buckets
    }

    pub fn lock(&self) -> LockHandle {
        self.lock
    }

    pub fn spec(&self) -> KvBlockSpec {
        self.spec
    }

    fn rd(&self, node: &ShmNode, off: u64) -> PrefixResult<u64> {
        Ok(node.view().load_u64_with(self.discipline, self.root.0 + off)?)
    }

    fn wr(&self, node: &ShmNode, off: u64, v: u64) -> PrefixResult<()> {
        Ok(node.view().store_u64_with(self.discipline, self.root.0 + off, v)?)
    }

    fn erd(&self, node: &ShmNode, e: u64, field: u64) -> PrefixResult<u64> {
        Ok(node.view().load_u64_with(self.discipline, e + field)?)
    }

    fn ewr(&self, node: &ShmNode, e: u64, field: u64, v: u64) -> PrefixResult<()> {
        Ok(node.view().store_u64_with(self.discipline, e + field, v)?)
    }

    fn bucket_off(&self, i: u32) -> u64 {
        BUCKETS_AT + i as u64 * LINE_SIZE
    }

    /// Offsets of every line holding a pin count, state or LRU link of `e`.
    pub fn hot_line(e: EntryRef) -> u64 {
        e.0 .0 + LINE_SIZE
    }

    fn find(&self, node: &ShmNode, hash: u64) -> PrefixResult<Option<(u32, u64)>> {
        let start = (hash % self.buckets as u64) as u32;
        for k in 0..self.buckets {
            let i = (start + k) % self.buckets;
            let off = self.bucket_off(i);
            match self.rd(node, off)? {
                B_EMPTY => return Ok(None),
                B_OCCUPIED if self.rd(node, off + 8)? == hash => {
                    return Ok(Some((i, self.rd(node, off + 16)?)));
                }
                _ => {}
            }
        }
        Ok(None)
    }

    /// First reusable bucket on `hash`'s probe path.
    fn free_slot(&self, node: &ShmNode, hash: u64) -> PrefixResult<Option<u32>> {
        let start = (hash % self.buckets as u64) as u32;
        let mut tomb = None;
        for k in 0..self.buckets {
            let i = (start + k) % self.buckets;
            match self.rd(node, self.bucket_off(i))? {
                B_EMPTY => return Ok(tomb.or(Some(i))),
                B_TOMBSTONE => {
                    tomb.get_or_insert(i);
                }
                _ => {}
            }
        }
        Ok(tomb)
    }

    /// Free bucket `i`. It becomes EMPTY when the next bucket is EMPTY, and
    /// then so do the tombstones directly before it; otherwise a TOMBSTONE.
    fn clear_bucket(&self, node: &ShmNode, i: u32) -> PrefixResult<()> {
        let n = self.buckets;
        let next = (i + 1) % n;
        if next == i || self.rd(node, self.bucket_off(next))? != B_EMPTY {
            return self.wr(node, self.bucket_off(i), if n == 1 { B_EMPTY } else { B_TOMBSTONE });
        }
        self.wr(node, self.bucket_off(i), B_EMPTY)?;
        let mut j = (i + n - 1) % n;
        while j != i && self.rd(node, self.bucket_off(j))? == B_TOMBSTONE {
            self.wr(node, self.bucket_off(j), B_EMPTY)?;
            j = (j + n - 1) % n;
        }
        Ok(())
    }

    fn lru_unlink(&self, node: &ShmNode, e: u64) -> PrefixResult<()> {
        let prev = self.erd(node, e, E_PREV)?;
        let next = self.erd(node, e, E_NEXT)?;
        if prev == NULL {
            self.wr(node, A_HEAD, next)?;
        } else {
            self.ewr(node, prev, E_NEXT, next)?;
        }
        if next == NULL {
            self.wr(node, A_TAIL, prev)?;
        } else {
            self.ewr(node, next, E_PREV, prev)?;
        }
        self.ewr(node, e, E_PREV, NULL)?;
        self.ewr(node, e, E_NEXT, NULL)
    }

    fn lru_append(&self, node: &ShmNode, e: u64) -> PrefixResult<()> {
        let tail = self.rd(node, A_TAIL)?;
        self.ewr(node, e, E_PREV, tail)?;
        self.ewr(node, e, E_NEXT, NULL)?;
        if tail == NULL {
            self.wr(node, A_HEAD, e)?;
        } else {
            self.ewr(node, tail, E_NEXT, e)?;
        }
        self.wr(node, A_TAIL, e)
    }

    /// Pin the longest run of READY entries matching `hashes` from the first.
    pub fn lookup_and_pin(&self, node: &ShmNode, hashes: &[u64]) -> PrefixResult<Lookup> {
        let _g = node.lock(self.lock)?;
        self.lookup_and_pin_locked(node, hashes)
    }

    pub fn lookup_and_pin_locked(&self, node: &ShmNode, hashes: &[u64]) -> PrefixResult<Lookup> {
        let mut entries = Vec::new();
        for &h in hashes {
            let Some((_, e)) = self.find(node, h)? else { break };
            if EntryState::decode(self.erd(node, e, E_STATE)?) != EntryState::Ready {
                break;
            }
            let rc = self.erd(node, e, E_REF)?;
            self.ewr(node, e, E_REF, rc + 1)?;
            if self.rd(node, A_TAIL)? != e {
                self.lru_unlink(node, e)?;
                self.lru_append(node, e)?;
            }
            entries.push(EntryRef(ShmRef(e)));
        }
        Ok(Lookup { hit_len: entries.len(), entries })
    }

    pub fn unpin(&self, node: &ShmNode, entries: &[EntryRef]) -> PrefixResult<()> {
        let _g = node.lock(self.lock)?;
        self.unpin_locked(node, entries)
    }

    /// Drop one pin from each entry. Stops at the first entry without pins.
    pub fn unpin_locked(&self, node: &ShmNode, entries: &[EntryRef]) -> PrefixResult<()> {
        for e in entries {
            let e = e.0 .0;
            let rc = self.erd(node, e, E_REF)?;
            if rc == 0 {
                return Err(PrefixError::UnpinUnderflow);
            }
            self.ewr(node, e, E_REF, rc - 1)?;
        }
        Ok(())
    }

    /// Claim a bucket and allocate an entry plus a DMA-only payload for
    /// `hash`. Evicts unpinned entries as needed to make room.
    pub fn insert_pending(&self, node: &ShmNode, hash: u64, token_count: u32) -> PrefixResult<Pending> {
        let _g = node.lock(self.lock)?;
        self.insert_pending_locked(node, hash, token_count)
    }

    pub fn insert_pending_locked(&self, node: &ShmNode, hash: u64, token_count: u32) -> PrefixResult<Pending> {
        if token_count == 0 {
            return Err(PrefixError::EmptyBlock);
        }
        if token_count > self.spec.tokens_per_block {
            return Err(PrefixError::BlockTooLong(token_count));
        }
        if self.find(node, hash)?.is_some() {
            return Err(PrefixError::Duplicate(hash));
        }
        let kv_size = self.spec.kv_size(token_count);
        let kv = self.alloc_evicting(node, |n| n.shmalloc_payload(kv_size))?;
        let entry = match self.alloc_evicting(node, |n| n.shmalloc(ENTRY_BYTES)) {
            Ok(e) => e,
            Err(err) => {
                node.shfree(kv)?;
                return Err(err);
            }
        };
        let bucket = loop {
            if let Some(i) = self.free_slot(node, hash)? {
                break i;
            }
            if self.evict_one_locked(node)?.is_none() {
                node.shfree(entry)?;
                node.shfree(kv)?;
                return Err(PrefixError::IndexFull);
            }
        };
        let cold = [hash, token_count as u64, kv, kv_size, bucket as u64];
        for (k, v) in cold.iter().enumerate() {
            self.ewr(node, entry, k as u64 * 8, *v)?;
        }
        self.ewr(node, entry, E_REF, 0)?;
        self.ewr(node, entry, E_STATE, EntryState::Pending.encode())?;
        self.ewr(node, entry, E_PREV, NULL)?;
        self.ewr(node, entry, E_NEXT, NULL)?;
        let b = self.bucket_off(bucket);
        self.wr(node, b + 8, hash)?;
        self.wr(node, b + 16, entry)?;
        self.wr(node, b, B_OCCUPIED)?;
        Ok(Pending { entry: EntryRef(ShmRef(entry)), kv_ref: ShmRef(kv), kv_size })
    }

    fn alloc_evicting(&self, node: &ShmNode, f: impl Fn(&ShmNode) -> Result<u64, AllocError>) -> PrefixResult<u64> {
        loop {
            match f(node) {
                Ok(off) => return Ok(off),
                Err(AllocError::OutOfMemory(n)) => {
                    if self.evict_one_locked(node)?.is_none() {
                        return Err(AllocError::OutOfMemory(n).into());
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Mark a pending entry READY. `done` must cover its whole payload.
    pub fn publish(&self, node: &ShmNode, entry: EntryRef, done: DmaCompletion) -> PrefixResult<()> {
        let _g = node.lock(self.lock)?;
        self.publish_locked(node, entry, done)
    }

    pub fn publish_locked(&self, node: &ShmNode, entry: EntryRef, done: DmaCompletion) -> PrefixResult<()> {
        let e = entry.0 .0;
        if EntryState::decode(self.erd(node, e, E_STATE)?) != EntryState::Pending {
            return Err(PrefixError::NotPending);
        }
        if !done.covers(self.erd(node, e, E_KV_REF)?, self.erd(node, e, E_KV_SIZE)?) {
            return Err(PrefixError::DmaIncomplete);
        }
        self.lru_append(node, e)?;
        let live = self.rd(node, A_LIVE)?;
        self.wr(node, A_LIVE, live + 1)?;
        self.ewr(node, e, E_STATE, EntryState::Ready.encode())
    }

    /// Give up on a pending entry, releasing its bucket and memory.
    pub fn abort_pending(&self, node: &ShmNode, entry: EntryRef) -> PrefixResult<()> {
        let _g = node.lock(self.lock)?;
        self.abort_pending_locked(node, entry)
    }

    pub fn abort_pending_locked(&self, node: &ShmNode, entry: EntryRef) -> PrefixResult<()> {
        let e = entry.0 .0;
        if EntryState::decode(self.erd(node, e, E_STATE)?) != EntryState::Pending {
            return Err(PrefixError::NotPending);
        }
        self.retire(node, e)
    }

    fn retire(&self, node: &ShmNode, e: u64) -> PrefixResult<()> {
        self.ewr(node, e, E_STATE, EntryState::Invalid.encode())?;
        self.clear_bucket(node, self.erd(node, e, E_BUCKET)? as u32)?;
        node.shfree(self.erd(node, e, E_KV_REF)?)?;
        node.shfree(e)?;
        Ok(())
    }

    /// Evict the least recently used entry without pins. Returns its hash.
    pub fn evict_one(&self, node: &ShmNode) -> PrefixResult<Option<u64>> {
        let _g = node.lock(self.lock)?;
        self.evict_one_locked(node)
    }

    pub fn evict_one_locked(&self, node: &ShmNode) -> PrefixResult<Option<u64>> {
        let mut e = self.rd(node, A_HEAD)?;
        while e != NULL {
            if self.erd(node, e, E_REF)? == 0 {
                let hash = self.erd(node, e, E_HASH)?;
                self.lru_unlink(node, e)?;
                let live = self.rd(node, A_LIVE)?;
                self.wr(node, A_LIVE, live - 1)?;
                self.retire(node, e)?;
                return Ok(Some(hash));
            }
            e = self.erd(node, e, E_NEXT)?;
        }
        Ok(None)
    }

    /// Read every field of an entry.
    pub fn entry_info(&self, node: &ShmNode, entry: EntryRef) -> PrefixResult<EntryInfo> {
        let e = entry.0 .0;
        Ok(EntryInfo {
            entry,
            hash: self.erd(node, e, E_HASH)?,
            token_count: self.erd(node, e, E_TOKENS)? as u32,
            kv_ref: ShmRef(self.erd(node, e, E_KV_REF)?),
            kv_size: self.erd(node, e, E_KV_SIZE)?,
            bucket: self.erd(node, e, E_BUCKET)? as u32,
            ref_count: self.erd(node, e, E_REF)?,
            state: EntryState::decode(self.erd(node, e, E_STATE)?),
        })
    }

    /// Entry currently indexed under `hash`, in any state.
    pub fn find_entry(&self, node: &ShmNode, hash: u64) -> PrefixResult<Option<EntryRef>> {
        Ok(self.find(node, hash)?.map(|(_, e)| EntryRef(ShmRef(e))))
    }

    /// READY entries from least to most recently used.
    pub fn lru_order(&self, node: &ShmNode) -> PrefixResult<Vec<EntryRef>> {
        let mut out = Vec::new();
        let mut e = self.rd(node, A_HEAD)?;
        while e != NULL {
            out.push(EntryRef(ShmRef(e)));
            e = self.erd(node, e, E_NEXT)?;
        }
        Ok(out)
    }

    pub fn live_count(&self, node: &ShmNode) -> PrefixResult<u64> {
        self.rd(node, A_LIVE)
    }

    pub fn dump(&self, node: &ShmNode) -> PrefixResult<IndexDump> {
        let _g = node.lock(self.lock)?;
        let (mut occupied, mut tombstones, mut pending) = (0, 0, Vec::new());
        for i in 0..self.buckets {
            match self.rd(node, self.bucket_off(i))? {
                B_OCCUPIED => {
                    occupied += 1;
                    let e = EntryRef(ShmRef(self.rd(node, self.bucket_off(i) + 16)?));
                    let info = self.entry_info(node, e)?;
                    if info.state == EntryState::Pending {
                        pending.push(info);
                    }
                }
                B_TOMBSTONE => tombstones += 1,
                _ => {}
            }
        }
        let lru = self
            .lru_order(node)?
            .into_iter()
            .map(|e| self.entry_info(node, e))
            .collect::<PrefixResult<_>>()?;
        Ok(IndexDump {
            root: self.root,
            buckets: self.buckets,
            occupied,
            tombstones,
            live_count: self.live_count(node)?,
            lru,
            pending,
        })
    }
}
