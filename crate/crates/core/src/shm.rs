//! Region formatting and the per-node library handle.
//!
//! Region layout, fixed at creation and recorded in the header lines:
//!
//! ```text
//! [header | lock table | object table | chunk bitmap | chunk descriptors |
//!  remote-free rings | (pad to chunk boundary) | chunks ...]
//! ```
//!
//! Every offset is a pure function of [`ShmConfig`], so all nodes agree on
//! where each structure lives.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocator::HeapState;
use crate::interlock::{LocalLockTable, ManagerState, SlotTrace};
use crate::memory::{
    BackingRegion, MemError, MemResult, NodeId, NodeView, RegionConfig, RegionState, LINE_SIZE,
};

const HEADER_MAGIC: u64 = 0x4b56_5348_4d30_3031; // "KVSHM001"
const HEADER_LINES: u64 = 2;

/// Reserved locks that precede no user entry; they sit after the user range.
pub(crate) const RESERVED_FIXED: u32 = 3;

/// Who runs the lock-manager scans.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ManagerMode {
    /// A dedicated thread started with [`Shm::spawn_manager`].
    Dedicated,
    /// Waiters drive the scan of the entry they are waiting on. Scans are
    /// still serialized, so there is exactly one manager at any instant.
    Inline,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShmConfig {
    pub capacity: u64,
    pub nodes: u32,
    /// Number of user-allocatable locks.
    pub lock_entries: u32,
    pub object_buckets: u32,
    pub chunk_size: u64,
    pub remote_ring_slots: u32,
    pub coherent: bool,
    pub manager: ManagerMode,
    /// Record slot transitions for CSV export.
    pub trace_locks: bool,
}

impl Default for ShmConfig {
    fn default() -> Self {
        Self {
            capacity: 64 << 20,
            nodes: 4,
            lock_entries: 64,
            object_buckets: 1024,
            chunk_size: 2 << 20,
            remote_ring_slots: 1024,
            coherent: false,
            manager: ManagerMode::Inline,
            trace_locks: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("node count must be between 1 and 65535, got {0}")]
    Nodes(u32),
    #[error("chunk size {0} must be a power of two of at least 4 KiB")]
    ChunkSize(u64),
    #[error("capacity {capacity} leaves no allocatable chunk after {metadata} bytes of metadata")]
    TooSmall { capacity: u64, metadata: u64 },
    #[error("{0} must be positive")]
    Zero(&'static str),
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error("region header does not match: {0}")]
    Header(String),
}

/// Byte offsets of every fixed structure.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Layout {
    pub capacity: u64,
    pub nodes: u32,
    pub user_locks: u32,
    pub total_locks: u32,
    pub lock_table: u64,
    pub lock_entry_stride: u64,
    pub lock_generation: u64,
    pub object_table: u64,
    pub object_buckets: u32,
    pub chunk_bitmap: u64,
    pub chunk_desc: u64,
    pub rings: u64,
    pub ring_stride: u64,
    pub ring_slots: u32,
    pub metadata_end: u64,
    pub chunk_size: u64,
    pub chunk_count: u64,
    pub reserved_chunks: u64,
}

pub(crate) const OBJECT_BUCKET_BYTES: u64 = 2 * LINE_SIZE;

fn lines_for(bytes: u64) -> u64 {
    bytes.div_ceil(LINE_SIZE) * LINE_SIZE
}

impl Layout {
    pub fn compute(cfg: &ShmConfig) -> Result<Self, ConfigError> {
        if cfg.nodes == 0 || cfg.nodes > u16::MAX as u32 {
            return Err(ConfigError::Nodes(cfg.nodes));
        }
        if !cfg.chunk_size.is_power_of_two() || cfg.chunk_size < 4096 {
            return Err(ConfigError::ChunkSize(cfg.chunk_size));
        }
        if cfg.object_buckets == 0 {
            return Err(ConfigError::Zero("object_buckets"));
        }
        if cfg.remote_ring_slots == 0 {
            return Err(ConfigError::Zero("remote_ring_slots"));
        }
        let total_locks = cfg.lock_entries + RESERVED_FIXED + cfg.nodes;
        let lock_entry_stride = (1 + cfg.nodes as u64) * LINE_SIZE;
        let lock_generation = HEADER_LINES * LINE_SIZE;
        let lock_table = lock_generation + LINE_SIZE;
        let object_table = lock_table + total_locks as u64 * lock_entry_stride;
        let chunk_count = cfg.capacity / cfg.chunk_size;
        let chunk_bitmap = object_table + cfg.object_buckets as u64 * OBJECT_BUCKET_BYTES;
        let chunk_desc = chunk_bitmap + lines_for(chunk_count.div_ceil(8));
        let rings = chunk_desc + lines_for(chunk_count * 8);
        let ring_stride = 2 * LINE_SIZE + lines_for(cfg.remote_ring_slots as u64 * 8);
        let metadata_end = rings + cfg.nodes as u64 * ring_stride;
        let reserved_chunks = metadata_end.div_ceil(cfg.chunk_size);
        if reserved_chunks >= chunk_count {
            return Err(ConfigError::TooSmall { capacity: cfg.capacity, metadata: metadata_end });
        }
        Ok(Self {
            capacity: cfg.capacity,
            nodes: cfg.nodes,
            user_locks: cfg.lock_entries,
            total_locks,
            lock_table,
            lock_entry_stride,
            lock_generation,
            object_table,
            object_buckets: cfg.object_buckets,
            chunk_bitmap,
            chunk_desc,
            rings,
            ring_stride,
            ring_slots: cfg.remote_ring_slots,
            metadata_end,
            chunk_size: cfg.chunk_size,
            chunk_count,
            reserved_chunks,
        })
    }

    fn header_words(&self) -> [u64; 16] {
        [
            HEADER_MAGIC,
            self.capacity,
            self.nodes as u64,
            self.user_locks as u64,
            self.total_locks as u64,
            self.object_buckets as u64,
            self.chunk_size,
            self.ring_slots as u64,
            self.chunk_count,
            self.reserved_chunks,
            self.metadata_end,
            0,
            0,
            0,
            0,
            0,
        ]
    }

    pub(crate) fn header_bytes(&self) -> Vec<u8> {
        self.header_words().iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    /// Check a header read back from a region against this layout.
    pub fn verify_header(&self, bytes: &[u8]) -> Result<(), ConfigError> {
        if bytes != self.header_bytes().as_slice() {
            let magic = u64::from_le_bytes(bytes[..8].try_into().unwrap_or([0; 8]));
            return Err(ConfigError::Header(if magic != HEADER_MAGIC {
                "bad magic".into()
            } else {
                "geometry differs".into()
            }));
        }
        Ok(())
    }

    pub fn lock_entry(&self, lock: u32) -> u64 {
        self.lock_table + lock as u64 * self.lock_entry_stride
    }

    pub fn lock_slot(&self, lock: u32, node: NodeId) -> u64 {
        self.lock_entry(lock) + (1 + node.0 as u64) * LINE_SIZE
    }

    pub fn object_bucket(&self, i: u32) -> u64 {
        self.object_table + i as u64 * OBJECT_BUCKET_BYTES
    }

    pub fn ring(&self, node: NodeId) -> u64 {
        self.rings + node.0 as u64 * self.ring_stride
    }

    pub fn chunk_offset(&self, chunk: u64) -> u64 {
        chunk * self.chunk_size
    }

    pub(crate) fn bootstrap_lock(&self) -> u32 {
        self.user_locks
    }

    pub(crate) fn bitmap_lock(&self) -> u32 {
        self.user_locks + 1
    }

    pub(crate) fn object_lock(&self) -> u32 {
        self.user_locks + 2
    }

    pub(crate) fn ring_lock(&self, node: NodeId) -> u32 {
        self.user_locks + RESERVED_FIXED + node.0
    }
}

/// Node-resident (DRAM) state for one node.
pub(crate) struct NodeLocal {
    pub(crate) locks: LocalLockTable,
    pub(crate) heap: Mutex<HeapState>,
    pub(crate) global_acquires: AtomicU64,
}

/// Everything outside the shared region that the model checker must capture
/// to rewind an execution: device state, manager cursor, node heaps.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ShmSnapshot {
    pub region: RegionState,
    pub manager: ManagerState,
    pub heaps: Vec<HeapState>,
}

/// The library instance shared by all emulated nodes.
pub struct Shm {
    pub(crate) region: BackingRegion,
    pub(crate) layout: Layout,
    pub(crate) config: ShmConfig,
    pub(crate) views: Vec<NodeView>,
    pub(crate) locals: Vec<NodeLocal>,
    pub(crate) manager: Mutex<ManagerState>,
    pub(crate) trace: Option<Mutex<SlotTrace>>,
}

impl fmt::Debug for Shm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Shm").field("layout", &self.layout).finish()
    }
}

impl Shm {
    /// Create a fresh region and format it.
    pub fn create(config: ShmConfig) -> Result<Arc<Self>, ConfigError> {
        let layout = Layout::compute(&config)?;
        let region = BackingRegion::new(RegionConfig {
            capacity: config.capacity,
            nodes: config.nodes,
            coherent: config.coherent,
        })?;
        region.with_state(|s| -> MemResult<()> {
            s.set_metadata_end(layout.reserved_chunks * layout.chunk_size);
            s.format_bytes(0, &layout.header_bytes())?;
            // Reserved locks are permanently allocated.
            for lock in layout.user_locks..layout.total_locks {
                s.format_bytes(layout.lock_entry(lock), &1u64.to_le_bytes())?;
            }
            // Metadata chunks are owned from the start.
            let mut bits = vec![0u8; layout.chunk_count.div_ceil(8) as usize];
            for c in 0..layout.reserved_chunks {
                bits[(c / 8) as usize] |= 1 << (c % 8);
            }
            s.format_bytes(layout.chunk_bitmap, &bits)
        })?;
        let views = (0..config.nodes)
            .map(|n| region.attach_node(NodeId(n)))
            .collect::<MemResult<Vec<_>>>()?;
        let locals = (0..config.nodes)
            .map(|_| NodeLocal {
                locks: LocalLockTable::new(layout.total_locks),
                heap: Mutex::new(HeapState::new(&layout)),
                global_acquires: AtomicU64::new(0),
            })
            .collect();
        let manager = Mutex::new(ManagerState::new(layout.total_locks));
        let trace = config.trace_locks.then(|| Mutex::new(SlotTrace::default()));
        Ok(Arc::new(Self { region, layout, config, views, locals, manager, trace }))
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn config(&self) -> &ShmConfig {
        &self.config
    }

    pub fn region(&self) -> &BackingRegion {
        &self.region
    }

    /// Library handle for a thread running on `node`.
    pub fn join(self: &Arc<Self>, node: NodeId) -> Result<ShmNode, MemError> {
        if node.0 >= self.config.nodes {
            return Err(MemError::NodeOutOfRange { node, nodes: self.config.nodes });
        }
        Ok(ShmNode { shm: Arc::clone(self), view: self.views[node.index()].clone() })
    }

    /// Re-read the header through `node`'s view and check it against the
    /// layout this instance computed.
    pub fn verify_header(&self, node: NodeId) -> Result<(), ConfigError> {
        let mut buf = vec![0u8; (HEADER_LINES * LINE_SIZE) as usize];
        self.views[node.index()].load_fresh(0, &mut buf)?;
        self.layout.verify_header(&buf)
    }

    pub fn snapshot(&self) -> ShmSnapshot {
        ShmSnapshot {
            region: self.region.snapshot(),
            manager: self.manager.lock().clone(),
            heaps: self.locals.iter().map(|l| l.heap.lock().clone()).collect(),
        }
    }

    pub fn restore(&self, snap: &ShmSnapshot) {
        self.region.restore(snap.region.clone());
        *self.manager.lock() = snap.manager.clone();
        for (l, h) in self.locals.iter().zip(&snap.heaps) {
            *l.heap.lock() = h.clone();
        }
    }

    /// Global-lock acquisitions performed by threads of `node` so far.
    pub fn global_acquires(&self, node: NodeId) -> u64 {
        self.locals[node.index()].global_acquires.load(Ordering::Relaxed)
    }
}

/// Per-thread handle: the library as seen from one node.
#[derive(Clone, Debug)]
pub struct ShmNode {
    pub(crate) shm: Arc<Shm>,
    pub(crate) view: NodeView,
}

impl ShmNode {
    pub fn node_id(&self) -> NodeId {
        self.view.node_id()
    }

    pub fn view(&self) -> &NodeView {
        &self.view
    }

    pub fn shm(&self) -> &Arc<Shm> {
        &self.shm
    }

    pub(crate) fn local(&self) -> &NodeLocal {
        &self.shm.locals[self.view.node_id().index()]
    }
}
