//! Two-level allocator over the shared region.
//!
//! Chunks are handed out from a global bitmap. Small allocations come from a
//! node's heap: power-of-two buddy blocks carved from chunks the node owns,
//! each starting with a one-line header. Large allocations take a run of
//! whole chunks straight from the bitmap and may be freed by any node.
//!
//! A node frees its own heap blocks locally. A heap block freed by another
//! node is pushed onto the owner's remote ring and reclaimed the next time
//! the owner allocates. Chunks go back to the bitmap only when fully free at
//! such a drain.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::interlock::LockError;
use crate::memory::{MemError, NodeId, LINE_SIZE};
use crate::shm::{Layout, Shm, ShmNode};

pub const HEADER_BYTES: u64 = LINE_SIZE;
const HEADER_MAGIC: u64 = 0xa110_c8ed_b10c_0001;
const MIN_BLOCK_SHIFT: u32 = 7;

const DESC_FREE: u64 = 0;
const DESC_HEAP: u64 = 1;
const DESC_RUN_START: u64 = 2;
const DESC_RUN_CONT: u64 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AllocError {
    #[error("allocation size must be positive")]
    ZeroSize,
    #[error("out of memory allocating {0} bytes")]
    OutOfMemory(u64),
    #[error("double free of {0:#x}")]
    DoubleFree(u64),
    #[error("{0:#x} is not an allocation")]
    NotAllocation(u64),
    #[error("remote free queue of {0} is full")]
    RemoteQueueFull(NodeId),
    #[error(transparent)]
    Lock(#[from] LockError),
    #[error(transparent)]
    Mem(#[from] MemError),
}

pub type AllocResult<T> = Result<T, AllocError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Desc {
    kind: u64,
    owner: u32,
    run_len: u32,
}

impl Desc {
    const FREE: Desc = Desc { kind: DESC_FREE, owner: 0, run_len: 0 };

    fn encode(self) -> u64 {
        self.kind | (self.owner as u64) << 8 | (self.run_len as u64) << 32
    }

    fn decode(v: u64) -> Self {
        Desc { kind: v & 0xff, owner: ((v >> 8) & 0xffff) as u32, run_len: (v >> 32) as u32 }
    }
}

/// Node-local heap bookkeeping. Lives in the node's DRAM.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct HeapState {
    max_shift: u32,
    /// Free block offsets per size class, smallest class first.
    free: Vec<BTreeSet<u64>>,
    /// Chunk indices owned by this heap.
    owned: BTreeSet<u64>,
    /// Live block offsets and their size shift.
    live: BTreeMap<u64, u32>,
}

impl HeapState {
    pub(crate) fn new(layout: &Layout) -> Self {
        let max_shift = layout.chunk_size.trailing_zeros();
        Self {
            max_shift,
            free: vec![BTreeSet::new(); (max_shift - MIN_BLOCK_SHIFT + 1) as usize],
            owned: BTreeSet::new(),
            live: BTreeMap::new(),
        }
    }

    fn class(&self, shift: u32) -> usize {
        (shift - MIN_BLOCK_SHIFT) as usize
    }

    /// Take a free block of exactly `shift`, splitting a larger one if needed.
    fn take(&mut self, shift: u32) -> Option<u64> {
        let from = (shift..=self.max_shift).find(|&s| !self.free[self.class(s)].is_empty())?;
        let c = self.class(from);
        let block = *self.free[c].iter().next()?;
        self.free[c].remove(&block);
        for s in (shift..from).rev() {
            let c = self.class(s);
            self.free[c].insert(block + (1 << s));
        }
        Some(block)
    }

    /// Return a block, merging with free buddies. Chunk starts are aligned to
    /// the chunk size, so buddies never cross a chunk.
    fn put(&mut self, mut block: u64, mut shift: u32) {
        while shift < self.max_shift {
            let buddy = block ^ (1 << shift);
            let c = self.class(shift);
            if !self.free[c].remove(&buddy) {
                break;
            }
            block = block.min(buddy);
            shift += 1;
        }
        let c = self.class(shift);
        self.free[c].insert(block);
    }

    fn fully_free_chunks(&self, chunk_size: u64) -> Vec<u64> {
        let top = self.class(self.max_shift);
        self.free[top].iter().map(|b| b / chunk_size).collect()
    }

    fn free_bytes(&self) -> u64 {
        self.free
            .iter()
            .enumerate()
            .map(|(c, set)| set.len() as u64 * (1u64 << (c as u32 + MIN_BLOCK_SHIFT)))
            .sum()
    }

    pub fn owned_chunks(&self) -> usize {
        self.owned.len()
    }

    pub fn live_blocks(&self) -> usize {
        self.live.len()
    }
}

/// How a request of a given size is served.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Plan {
    Heap { shift: u32 },
    Run { chunks: u64 },
}

fn plan(size: u64, chunk_size: u64) -> Plan {
    let block = (size + HEADER_BYTES).max(1 << MIN_BLOCK_SHIFT).next_power_of_two();
    if block <= chunk_size / 2 {
        Plan::Heap { shift: block.trailing_zeros() }
    } else {
        Plan::Run { chunks: size.div_ceil(chunk_size) }
    }
}

/// Usable bytes behind an allocation of `size` with the given chunk size.
pub fn usable_size(size: u64, chunk_size: u64) -> u64 {
    match plan(size, chunk_size) {
        Plan::Heap { shift } => (1 << shift) - HEADER_BYTES,
        Plan::Run { chunks } => chunks * chunk_size,
    }
}

/// Free space and overhead, as JSON-serializable counters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Occupancy {
    pub capacity: u64,
    pub chunk_size: u64,
    pub chunks_total: u64,
    pub chunks_reserved: u64,
    pub chunks_used: u64,
    pub chunks_free: u64,
    /// Region header, tables and the tail that does not fill a chunk.
    pub metadata_bytes: u64,
    pub free_chunk_bytes: u64,
    pub heap_free_bytes: u64,
    /// Blocks freed by other nodes and not yet drained by their owner.
    pub remote_pending_bytes: u64,
    pub remote_pending: Vec<usize>,
    /// Per node, block size to free-block count.
    pub heap_free_counts: Vec<BTreeMap<u64, usize>>,
    pub heap_owned_chunks: Vec<usize>,
    pub heap_live_blocks: Vec<usize>,
    pub run_chunks: u64,
    pub dma_ranges: usize,
}

struct Header {
    magic: u64,
    shift: u32,
    owner: u32,
    live: bool,
}

impl ShmNode {
    fn layout(&self) -> &Layout {
        &self.shm.layout
    }

    fn read_desc(&self, chunk: u64) -> AllocResult<Desc> {
        let off = self.layout().chunk_desc + chunk * 8;
        Ok(Desc::decode(self.view.load_fresh_u64(off)?))
    }

    fn write_desc(&self, chunk: u64, d: Desc) -> AllocResult<()> {
        let off = self.layout().chunk_desc + chunk * 8;
        Ok(self.view.store_through_u64(off, d.encode())?)
    }

    fn read_bitmap(&self) -> AllocResult<Vec<u8>> {
        let l = self.layout();
        let mut bits = vec![0u8; l.chunk_count.div_ceil(8) as usize];
        self.view.load_fresh(l.chunk_bitmap, &mut bits)?;
        Ok(bits)
    }

    /// Set or clear bits `[first, first + n)` and write back the touched bytes.
    fn write_bits(&self, bits: &mut [u8], first: u64, n: u64, set: bool) -> AllocResult<()> {
        for c in first..first + n {
            let (b, m) = ((c / 8) as usize, 1u8 << (c % 8));
            if set {
                bits[b] |= m;
            } else {
                bits[b] &= !m;
            }
        }
        let lo = (first / 8) as usize;
        let hi = ((first + n - 1) / 8) as usize;
        Ok(self.view.store_through(self.layout().chunk_bitmap + lo as u64, &bits[lo..=hi])?)
    }

    /// First-fit run of `n` clear bits. Caller holds the bitmap lock.
    fn claim_run(&self, n: u64, desc: Desc) -> AllocResult<Option<u64>> {
        let l = self.layout();
        let mut bits = self.read_bitmap()?;
        let is_set = |bits: &[u8], c: u64| bits[(c / 8) as usize] & (1 << (c % 8)) != 0;
        let mut start = l.reserved_chunks;
        while start + n <= l.chunk_count {
            match (start..start + n).find(|&c| is_set(&bits, c)) {
                Some(used) => start = used + 1,
                None => {
                    self.write_bits(&mut bits, start, n, true)?;
                    self.write_desc(start, desc)?;
                    for c in start + 1..start + n {
                        self.write_desc(c, Desc { kind: DESC_RUN_CONT, owner: desc.owner, run_len: 0 })?;
                    }
                    return Ok(Some(start));
                }
            }
        }
        Ok(None)
    }

    /// Clear a run's bits and descriptors. Caller holds the bitmap lock.
    fn release_run(&self, start: u64, n: u64) -> AllocResult<()> {
        let mut bits = self.read_bitmap()?;
        for c in start..start + n {
            self.write_desc(c, Desc::FREE)?;
        }
        self.write_bits(&mut bits, start, n, false)
    }

    fn read_header(&self, block: u64) -> AllocResult<Header> {
        let mut b = [0u8; 32];
        self.view.load_fresh(block, &mut b)?;
        let w = |i: usize| u64::from_le_bytes(b[i * 8..i * 8 + 8].try_into().unwrap());
        Ok(Header { magic: w(0), shift: w(1) as u32, owner: w(2) as u32, live: w(3) != 0 })
    }

    fn write_header(&self, block: u64, shift: u32, live: bool) -> AllocResult<()> {
        let words = [HEADER_MAGIC, shift as u64, self.node_id().0 as u64, live as u64];
        let bytes: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
        Ok(self.view.store_through(block, &bytes)?)
    }

    fn set_header_live(&self, block: u64, live: bool) -> AllocResult<()> {
        Ok(self.view.store_through_u64(block + 24, live as u64)?)
    }

    fn ring_counters(&self, owner: NodeId) -> AllocResult<(u64, u64)> {
        let ring = self.layout().ring(owner);
        Ok((self.view.load_fresh_u64(ring)?, self.view.load_fresh_u64(ring + LINE_SIZE)?))
    }

    fn ring_slot(&self, owner: NodeId, index: u64) -> u64 {
        let l = self.layout();
        l.ring(owner) + 2 * LINE_SIZE + (index % l.ring_slots as u64) * 8
    }

    /// Offsets waiting on `owner`'s remote ring.
    pub fn remote_pending(&self, owner: NodeId) -> AllocResult<Vec<u64>> {
        let (head, tail) = self.ring_counters(owner)?;
        (head..tail)
            .map(|i| Ok(self.view.load_fresh_u64(self.ring_slot(owner, i))?))
            .collect()
    }

    /// Reclaim remotely freed blocks, then hand fully free chunks back to the
    /// bitmap. The ring is peeked without its lock; a stale empty reading
    /// only postpones reclamation to a later call.
    fn drain(&self, heap: &mut HeapState) -> AllocResult<()> {
        let me = self.node_id();
        let (head, tail) = self.ring_counters(me)?;
        if head == tail {
            return Ok(());
        }
        let blocks = {
            let _g = self.lock_id(self.layout().ring_lock(me))?;
            let (head, tail) = self.ring_counters(me)?;
            let mut blocks = Vec::with_capacity((tail - head) as usize);
            for i in head..tail {
                blocks.push(self.view.load_fresh_u64(self.ring_slot(me, i))? - HEADER_BYTES);
            }
            self.view.store_through_u64(self.layout().ring(me), tail)?;
            blocks
        };
        for block in blocks {
            if let Some(shift) = heap.live.remove(&block) {
                heap.put(block, shift);
            }
        }
        self.return_free_chunks(heap)
    }

    fn return_free_chunks(&self, heap: &mut HeapState) -> AllocResult<()> {
        let chunks = heap.fully_free_chunks(self.layout().chunk_size);
        if chunks.is_empty() {
            return Ok(());
        }
        let _g = self.lock_id(self.layout().bitmap_lock())?;
        for c in chunks {
            let top = heap.class(heap.max_shift);
            heap.free[top].remove(&self.layout().chunk_offset(c));
            heap.owned.remove(&c);
            self.release_run(c, 1)?;
        }
        Ok(())
    }

    fn alloc_heap(&self, heap: &mut HeapState, size: u64, shift: u32) -> AllocResult<u64> {
        let block = match heap.take(shift) {
            Some(b) => b,
            None => {
                let me = Desc { kind: DESC_HEAP, owner: self.node_id().0, run_len: 1 };
                let chunk = {
                    let _g = self.lock_id(self.layout().bitmap_lock())?;
                    self.claim_run(1, me)?
                };
                let chunk = chunk.ok_or(AllocError::OutOfMemory(size))?;
                heap.owned.insert(chunk);
                heap.put(self.layout().chunk_offset(chunk), heap.max_shift);
                heap.take(shift).expect("fresh chunk serves any heap class")
            }
        };
        self.write_header(block, shift, true)?;
        heap.live.insert(block, shift);
        Ok(block + HEADER_BYTES)
    }

    fn alloc_run(&self, heap: &mut HeapState, size: u64, chunks: u64) -> AllocResult<u64> {
        let desc = Desc {
            kind: DESC_RUN_START,
            owner: self.node_id().0,
            run_len: u32::try_from(chunks).map_err(|_| AllocError::OutOfMemory(size))?,
        };
        let mut got = {
            let _g = self.lock_id(self.layout().bitmap_lock())?;
            self.claim_run(chunks, desc)?
        };
        if got.is_none() && !heap.fully_free_chunks(self.layout().chunk_size).is_empty() {
            self.return_free_chunks(heap)?;
            let _g = self.lock_id(self.layout().bitmap_lock())?;
            got = self.claim_run(chunks, desc)?;
        }
        got.map(|c| self.layout().chunk_offset(c)).ok_or(AllocError::OutOfMemory(size))
    }

    /// Allocate at least `size` bytes. The result is line aligned.
    pub fn shmalloc(&self, size: u64) -> AllocResult<u64> {
        if size == 0 {
            return Err(AllocError::ZeroSize);
        }
        let mut heap = self.local().heap.lock();
        self.drain(&mut heap)?;
        match plan(size, self.layout().chunk_size) {
            Plan::Heap { shift } => self.alloc_heap(&mut heap, size, shift),
            Plan::Run { chunks } => self.alloc_run(&mut heap, size, chunks),
        }
    }

    /// Allocate a range that only DMA may touch until it is freed.
    pub fn shmalloc_payload(&self, size: u64) -> AllocResult<u64> {
        let off = self.shmalloc(size)?;
        let len = usable_size(size, self.layout().chunk_size);
        if let Err(e) = self.shm.region.mark_dma_only(off, len) {
            self.shfree(off)?;
            return Err(e.into());
        }
        Ok(off)
    }

    /// Free an allocation made by any node.
    pub fn shfree(&self, offset: u64) -> AllocResult<()> {
        let l = self.layout();
        if offset < l.reserved_chunks * l.chunk_size
            || offset >= l.chunk_count * l.chunk_size
            || !offset.is_multiple_of(LINE_SIZE)
        {
            return Err(AllocError::NotAllocation(offset));
        }
        let chunk = offset / l.chunk_size;
        let desc = self.read_desc(chunk)?;
        match desc.kind {
            DESC_RUN_START if offset == l.chunk_offset(chunk) => {
                let _g = self.lock_id(l.bitmap_lock())?;
                // Re-read under the lock so two racing frees cannot both win.
                let desc = self.read_desc(chunk)?;
                if desc.kind != DESC_RUN_START {
                    return Err(AllocError::DoubleFree(offset));
                }
                let _ = self.shm.region.unmark_dma_only(offset);
                self.release_run(chunk, desc.run_len as u64)
            }
            DESC_HEAP if offset - HEADER_BYTES >= l.chunk_offset(chunk) => {
                self.free_heap(offset, NodeId(desc.owner))
            }
            DESC_FREE if offset == l.chunk_offset(chunk) => Err(AllocError::DoubleFree(offset)),
            _ => Err(AllocError::NotAllocation(offset)),
        }
    }

    fn free_heap(&self, offset: u64, owner: NodeId) -> AllocResult<()> {
        let block = offset - HEADER_BYTES;
        let h = self.read_header(block)?;
        let aligned = (MIN_BLOCK_SHIFT..=self.layout().chunk_size.trailing_zeros()).contains(&h.shift)
            && block.is_multiple_of(1 << h.shift);
        if h.magic != HEADER_MAGIC || h.owner != owner.0 || !aligned {
            return Err(AllocError::NotAllocation(offset));
        }
        if owner == self.node_id() {
            let mut heap = self.local().heap.lock();
            if heap.live.get(&block) != Some(&h.shift) {
                return Err(if h.live {
                    AllocError::NotAllocation(offset)
                } else {
                    AllocError::DoubleFree(offset)
                });
            }
            let _ = self.shm.region.unmark_dma_only(offset);
            self.set_header_live(block, false)?;
            heap.live.remove(&block);
            heap.put(block, h.shift);
            return Ok(());
        }
        let _g = self.lock_id(self.layout().ring_lock(owner))?;
        // Under the ring lock no other remote free of this block can race.
        if !self.read_header(block)?.live {
            return Err(AllocError::DoubleFree(offset));
        }
        let (head, tail) = self.ring_counters(owner)?;
        if tail - head >= self.layout().ring_slots as u64 {
            return Err(AllocError::RemoteQueueFull(owner));
        }
        let _ = self.shm.region.unmark_dma_only(offset);
        self.set_header_live(block, false)?;
        self.view.store_through_u64(self.ring_slot(owner, tail), offset)?;
        self.view.store_through_u64(self.layout().ring(owner) + LINE_SIZE, tail + 1)?;
        Ok(())
    }
}

impl Shm {
    /// Snapshot of allocator occupancy, read from the backing store and the
    /// node heaps. Meaningful only while no allocator call is in flight.
    pub fn occupancy(&self) -> Result<Occupancy, MemError> {
        let l = &self.layout;
        let (bits, descs, rings) = self.region.with_state(|s| -> Result<_, MemError> {
            let bits = s.backing_bytes(l.chunk_bitmap, l.chunk_count.div_ceil(8))?;
            let descs = s.backing_bytes(l.chunk_desc, l.chunk_count * 8)?;
            let mut rings = Vec::new();
            for n in 0..l.nodes {
                let r = l.ring(NodeId(n));
                let word = |o: u64| -> Result<u64, MemError> {
                    Ok(u64::from_le_bytes(s.backing_bytes(o, 8)?.try_into().unwrap()))
                };
                let (head, tail) = (word(r)?, word(r + LINE_SIZE)?);
                let mut pending = 0u64;
                let mut count = 0usize;
                for i in head..tail {
                    let off = word(r + 2 * LINE_SIZE + (i % l.ring_slots as u64) * 8)?;
                    pending += 1 << word(off - HEADER_BYTES + 8)?;
                    count += 1;
                }
                rings.push((count, pending));
            }
            Ok((bits, descs, rings))
        })?;
        let used = (0..l.chunk_count).filter(|&c| bits[(c / 8) as usize] & (1 << (c % 8)) != 0).count() as u64;
        let run_chunks = (l.reserved_chunks..l.chunk_count)
            .filter(|&c| {
                let d = Desc::decode(u64::from_le_bytes(descs[c as usize * 8..][..8].try_into().unwrap()));
                d.kind == DESC_RUN_START || d.kind == DESC_RUN_CONT
            })
            .count() as u64;
        let heaps: Vec<HeapState> = self.locals.iter().map(|n| n.heap.lock().clone()).collect();
        let free = l.chunk_count - used;
        Ok(Occupancy {
            capacity: l.capacity,
            chunk_size: l.chunk_size,
            chunks_total: l.chunk_count,
            chunks_reserved: l.reserved_chunks,
            chunks_used: used,
            chunks_free: free,
            metadata_bytes: l.reserved_chunks * l.chunk_size + (l.capacity - l.chunk_count * l.chunk_size),
            free_chunk_bytes: free * l.chunk_size,
            heap_free_bytes: heaps.iter().map(HeapState::free_bytes).sum(),
            remote_pending_bytes: rings.iter().map(|r| r.1).sum(),
            remote_pending: rings.iter().map(|r| r.0).collect(),
            heap_free_counts: heaps
                .iter()
                .map(|h| {
                    h.free
                        .iter()
                        .enumerate()
                        .filter(|(_, s)| !s.is_empty())
                        .map(|(c, s)| (1u64 << (c as u32 + MIN_BLOCK_SHIFT), s.len()))
                        .collect()
                })
                .collect(),
            heap_owned_chunks: heaps.iter().map(HeapState::owned_chunks).collect(),
            heap_live_blocks: heaps.iter().map(HeapState::live_blocks).collect(),
            run_chunks,
            dma_ranges: self.region.with_state(|s| s.dma_ranges().count()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shm::ShmConfig;
    use std::sync::Arc;

    fn shm(nodes: u32) -> Arc<Shm> {
        Shm::create(ShmConfig {
            capacity: 4 << 20,
            nodes,
            lock_entries: 2,
            object_buckets: 16,
            chunk_size: 64 << 10,
            remote_ring_slots: 8,
            ..ShmConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn plan_thresholds() {
        let cs = 64 << 10;
        assert_eq!(plan(1, cs), Plan::Heap { shift: 7 });
        assert_eq!(plan(64, cs), Plan::Heap { shift: 7 });
        assert_eq!(plan(65, cs), Plan::Heap { shift: 8 });
        assert_eq!(plan(cs / 2 - 64, cs), Plan::Heap { shift: 15 });
        assert_eq!(plan(cs / 2 - 63, cs), Plan::Run { chunks: 1 });
        assert_eq!(plan(cs + 1, cs), Plan::Run { chunks: 2 });
    }

    #[test]
    fn small_allocation_is_line_aligned() {
        let s = shm(1);
        let n = s.join(NodeId(0)).unwrap();
        for size in [1, 8, 64, 65, 1000] {
            assert_eq!(n.shmalloc(size).unwrap() % LINE_SIZE, 0);
        }
    }

    #[test]
    fn chunk_exhaustion_count() {
        let s = shm(1);
        let n = s.join(NodeId(0)).unwrap();
        let l = s.layout().clone();
        let mut count = 0;
        while n.shmalloc(l.chunk_size).is_ok() {
            count += 1;
        }
        assert_eq!(count, l.capacity / l.chunk_size - l.metadata_end.div_ceil(l.chunk_size));
    }

    #[test]
    fn free_then_realloc_reuses_and_double_free_errors() {
        let s = shm(1);
        let n = s.join(NodeId(0)).unwrap();
        let a = n.shmalloc(64).unwrap();
        n.shfree(a).unwrap();
        assert_eq!(n.shmalloc(64).unwrap(), a);
        n.shfree(a).unwrap();
        assert_eq!(n.shfree(a), Err(AllocError::DoubleFree(a)));
        let r = n.shmalloc(100 << 10).unwrap();
        n.shfree(r).unwrap();
        assert!(n.shfree(r).is_err());
        assert!(n.shfree(12345).is_err());
    }

    #[test]
    fn remote_free_is_queued_and_drained_by_owner() {
        let s = shm(2);
        let n0 = s.join(NodeId(0)).unwrap();
        let n1 = s.join(NodeId(1)).unwrap();
        let a = n0.shmalloc(64).unwrap();
        let _keep = n0.shmalloc(64).unwrap();
        n1.shfree(a).unwrap();
        assert_eq!(n0.remote_pending(NodeId(0)).unwrap(), vec![a]);
        assert_eq!(n1.shfree(a), Err(AllocError::DoubleFree(a)));
        assert_eq!(n0.shmalloc(64).unwrap(), a);
        assert!(n0.remote_pending(NodeId(0)).unwrap().is_empty());
    }

    #[test]
    fn remote_ring_full() {
        let s = shm(2);
        let n0 = s.join(NodeId(0)).unwrap();
        let n1 = s.join(NodeId(1)).unwrap();
        let blocks: Vec<u64> = (0..9).map(|_| n0.shmalloc(64).unwrap()).collect();
        for &b in &blocks[..8] {
            n1.shfree(b).unwrap();
        }
        assert_eq!(n1.shfree(blocks[8]), Err(AllocError::RemoteQueueFull(NodeId(0))));
        n0.shmalloc(64).unwrap();
        n1.shfree(blocks[8]).unwrap();
    }

    #[test]
    fn hit_on_free_list_takes_no_global_lock() {
        let s = shm(2);
        let n = s.join(NodeId(1)).unwrap();
        let a = n.shmalloc(200).unwrap();
        n.shfree(a).unwrap();
        let before = s.global_acquires(NodeId(1));
        n.shmalloc(200).unwrap();
        n.shmalloc(64).unwrap();
        assert_eq!(s.global_acquires(NodeId(1)), before);
    }

    #[test]
    fn payload_is_dma_only_until_freed() {
        let s = shm(2);
        let n = s.join(NodeId(0)).unwrap();
        let p = n.shmalloc_payload(100 << 10).unwrap();
        assert!(s.region().with_state(|st| st.is_dma_only(p, 100 << 10)));
        assert!(n.view().store_u64(p, 1).is_err());
        s.join(NodeId(1)).unwrap().shfree(p).unwrap();
        assert!(!s.region().with_state(|st| st.is_dma_only(p, 8)));
    }

    #[test]
    fn buddies_merge_back_to_a_whole_chunk() {
        let s = shm(1);
        let mut h = HeapState::new(s.layout());
        h.put(0x10000, 16);
        let a = h.take(7).unwrap();
        let b = h.take(9).unwrap();
        h.put(a, 7);
        h.put(b, 9);
        assert_eq!(h.fully_free_chunks(64 << 10), vec![1]);
        assert_eq!(h.free_bytes(), 64 << 10);
    }
}
