//! Emulated multi-host shared-memory device without cross-host coherence.
//!
//! Every node reaches the device through a private write-back cache. Stores
//! land in the node's cache and stay invisible to other nodes until the line
//! is written back (a synchronous `clflush`, a drained `clflushopt`, or a
//! spontaneous eviction injected by the adversary). Loads hit whatever copy
//! the node already holds, which may be stale. DMA transfers bypass every
//! cache and may only target ranges registered as DMA-only.
//!
//! The whole device state lives in [`RegionState`], a plain value that can be
//! cloned, hashed and compared. The model checker snapshots it at every branch
//! point; concurrent tests share it behind a mutex in [`BackingRegion`].

use std::cell::Cell;
use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Cacheline size of the emulated device.
pub const LINE_SIZE: u64 = 64;

type Line = [u8; LINE_SIZE as usize];

const ZERO_LINE: Line = [0; LINE_SIZE as usize];

/// Identifier of a host attached to the device.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node{}", self.0)
    }
}

impl From<u32> for NodeId {
    fn from(v: u32) -> Self {
        NodeId(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemError {
    #[error("range [{offset:#x}, +{len}) exceeds region capacity {capacity:#x}")]
    OutOfBounds { offset: u64, len: u64, capacity: u64 },
    #[error("CPU access to DMA-only payload range at {offset:#x} (+{len})")]
    DmaOnly { offset: u64, len: u64 },
    #[error("DMA to {offset:#x} (+{len}) outside any DMA-only range")]
    NotDmaRange { offset: u64, len: u64 },
    #[error("DMA-only range {offset:#x} (+{len}) overlaps an existing registration or metadata")]
    DmaOverlap { offset: u64, len: u64 },
    #[error("{node} holds dirty lines inside {offset:#x} (+{len})")]
    DirtyInPayload { node: NodeId, offset: u64, len: u64 },
    #[error("{node} out of range (region configured for {nodes} nodes)")]
    NodeOutOfRange { node: NodeId, nodes: u32 },
    #[error("{0} already attached")]
    AlreadyAttached(NodeId),
    #[error("capacity {0} is not a positive multiple of the line size")]
    BadCapacity(u64),
    #[error("address {0:#x} lies outside this node's mapping")]
    AddressOutsideMapping(u64),
    #[error("I/O error: {0}")]
    Io(String),
}

pub type MemResult<T> = Result<T, MemError>;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct CachedLine {
    data: Line,
    dirty: bool,
}

/// Private cache contents of one node.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct NodeCache {
    lines: BTreeMap<u64, CachedLine>,
    deferred: VecDeque<u64>,
}

impl NodeCache {
    pub fn cached_lines(&self) -> impl Iterator<Item = (u64, bool)> + '_ {
        self.lines.iter().map(|(&l, c)| (l, c.dirty))
    }

    pub fn deferred_flushes(&self) -> impl Iterator<Item = u64> + '_ {
        self.deferred.iter().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty() && self.deferred.is_empty()
    }
}

/// Kinds of memory events recorded by the optional event log.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Load,
    Store,
    Clflush,
    Clflushopt,
    Fence,
    Drain,
    Writeback,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemEvent {
    pub node: NodeId,
    pub thread: u64,
    pub kind: EventKind,
    /// First and last line index touched (inclusive).
    pub first_line: u64,
    pub last_line: u64,
}

/// A load that returned bytes differing from the most recent program store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StaleLoad {
    pub node: NodeId,
    pub offset: u64,
    pub len: u64,
}

/// An action the adversary may take against the caches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdversaryAction {
    /// Complete one queued `clflushopt` on `node`.
    Drain { node: NodeId, line: u64 },
    /// Spontaneously evict a dirty line, making an unflushed store visible.
    Writeback { node: NodeId, line: u64 },
    Noop,
}

impl fmt::Display for AdversaryAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdversaryAction::Drain { node, line } => write!(f, "drain({node}, line {line})"),
            AdversaryAction::Writeback { node, line } => {
                write!(f, "writeback({node}, line {line})")
            }
            AdversaryAction::Noop => f.write_str("noop"),
        }
    }
}

thread_local! {
    static THREAD_TAG: Cell<u64> = const { Cell::new(0) };
}

static NEXT_THREAD_TAG: AtomicU64 = AtomicU64::new(1);

pub(crate) fn thread_tag() -> u64 {
    THREAD_TAG.with(|t| {
        if t.get() == 0 {
            t.set(NEXT_THREAD_TAG.fetch_add(1, Ordering::Relaxed));
        }
        t.get()
    })
}

/// Complete device state: backing store, per-node caches, DMA registrations.
///
/// The backing store is sparse; lines never written read as zero. Equality and
/// hashing cover backing bytes, caches, DMA registrations and the staleness
/// ghost; the event log and the pending stale-load list are bookkeeping only.
#[derive(Clone, Debug)]
pub struct RegionState {
    capacity: u64,
    coherent: bool,
    metadata_end: u64,
    backing: BTreeMap<u64, Line>,
    caches: Vec<NodeCache>,
    dma_ranges: BTreeMap<u64, u64>,
    ghost: Option<BTreeMap<u64, Line>>,
    stale: Vec<StaleLoad>,
    log: Option<Vec<MemEvent>>,
}

impl PartialEq for RegionState {
    fn eq(&self, other: &Self) -> bool {
        self.capacity == other.capacity
            && self.coherent == other.coherent
            && self.backing == other.backing
            && self.caches == other.caches
            && self.dma_ranges == other.dma_ranges
            && self.ghost == other.ghost
    }
}

impl Eq for RegionState {}

impl Hash for RegionState {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.capacity.hash(state);
        self.backing.hash(state);
        self.caches.hash(state);
        self.dma_ranges.hash(state);
        self.ghost.hash(state);
    }
}

fn line_span(offset: u64, len: u64) -> std::ops::RangeInclusive<u64> {
    let first = offset / LINE_SIZE;
    let last = if len == 0 { first } else { (offset + len - 1) / LINE_SIZE };
    first..=last
}

impl RegionState {
    pub fn new(capacity: u64, nodes: u32) -> MemResult<Self> {
        if capacity == 0 || !capacity.is_multiple_of(LINE_SIZE) {
            return Err(MemError::BadCapacity(capacity));
        }
        Ok(Self {
            capacity,
            coherent: false,
            metadata_end: 0,
            backing: BTreeMap::new(),
            caches: vec![NodeCache::default(); nodes as usize],
            dma_ranges: BTreeMap::new(),
            ghost: None,
            stale: Vec::new(),
            log: None,
        })
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn node_count(&self) -> u32 {
        self.caches.len() as u32
    }

    pub fn is_coherent(&self) -> bool {
        self.coherent
    }

    pub fn cache(&self, node: NodeId) -> &NodeCache {
        &self.caches[node.index()]
    }

    fn check_bounds(&self, offset: u64, len: u64) -> MemResult<()> {
        match offset.checked_add(len) {
            Some(end) if end <= self.capacity => Ok(()),
            _ => Err(MemError::OutOfBounds { offset, len, capacity: self.capacity }),
        }
    }

    fn overlaps_dma(&self, offset: u64, len: u64) -> bool {
        let end = offset + len.max(1);
        // The only candidate is the last registration starting before `end`.
        self.dma_ranges
            .range(..end)
            .next_back()
            .is_some_and(|(_, &r_end)| r_end > offset)
    }

    fn inside_dma(&self, offset: u64, len: u64) -> bool {
        self.dma_ranges
            .range(..=offset)
            .next_back()
            .is_some_and(|(_, &r_end)| offset + len <= r_end)
    }

    fn check_cpu(&self, offset: u64, len: u64) -> MemResult<()> {
        self.check_bounds(offset, len)?;
        if self.overlaps_dma(offset, len) {
            return Err(MemError::DmaOnly { offset, len });
        }
        Ok(())
    }

    fn backing_line(&self, line: u64) -> Line {
        self.backing.get(&line).copied().unwrap_or(ZERO_LINE)
    }

    fn write_backing_line(&mut self, line: u64, data: Line) {
        if data == ZERO_LINE {
            self.backing.remove(&line);
        } else {
            self.backing.insert(line, data);
        }
    }

    fn record(&mut self, node: NodeId, kind: EventKind, offset: u64, len: u64) {
        if let Some(log) = self.log.as_mut() {
            let span = line_span(offset, len);
            log.push(MemEvent {
                node,
                thread: thread_tag(),
                kind,
                first_line: *span.start(),
                last_line: *span.end(),
            });
        }
    }

    /// Copy bytes starting at `offset` as node `node` would observe them.
    pub fn load(&mut self, node: NodeId, offset: u64, buf: &mut [u8]) -> MemResult<()> {
        let len = buf.len() as u64;
        self.check_cpu(offset, len)?;
        self.record(node, EventKind::Load, offset, len);
        if len == 0 {
            return Ok(());
        }
        for line in line_span(offset, len) {
            let data = if self.coherent {
                self.backing_line(line)
            } else {
                let fetched = self.backing_line(line);
                let cache = &mut self.caches[node.index()];
                cache
                    .lines
                    .entry(line)
                    .or_insert(CachedLine { data: fetched, dirty: false })
                    .data
            };
            copy_out(line, &data, offset, buf);
        }
        if let Some(ghost) = self.ghost.as_ref() {
            let mut expected = vec![0u8; buf.len()];
            for line in line_span(offset, len) {
                let data = ghost.get(&line).copied().unwrap_or(ZERO_LINE);
                copy_out(line, &data, offset, &mut expected);
            }
            if expected != buf {
                self.stale.push(StaleLoad { node, offset, len });
            }
        }
        Ok(())
    }

    pub fn store(&mut self, node: NodeId, offset: u64, data: &[u8]) -> MemResult<()> {
        let len = data.len() as u64;
        self.check_cpu(offset, len)?;
        self.record(node, EventKind::Store, offset, len);
        if len == 0 {
            return Ok(());
        }
        for line in line_span(offset, len) {
            if self.coherent {
                let mut cur = self.backing_line(line);
                copy_in(line, &mut cur, offset, data);
                self.write_backing_line(line, cur);
            } else {
                let fetched = self.backing_line(line);
                let cache = &mut self.caches[node.index()];
                let entry = cache
                    .lines
                    .entry(line)
                    .or_insert(CachedLine { data: fetched, dirty: false });
                copy_in(line, &mut entry.data, offset, data);
                entry.dirty = true;
            }
            if let Some(ghost) = self.ghost.as_mut() {
                let cur = ghost.entry(line).or_insert(ZERO_LINE);
                copy_in(line, cur, offset, data);
            }
        }
        Ok(())
    }

    /// Synchronous write-back and invalidate of every line covering the range.
    pub fn clflush(&mut self, node: NodeId, offset: u64, len: u64) -> MemResult<()> {
        self.check_bounds(offset, len)?;
        self.record(node, EventKind::Clflush, offset, len);
        if self.coherent {
            return Ok(());
        }
        for line in line_span(offset, len) {
            self.evict(node, line);
        }
        Ok(())
    }

    /// Queues dirty covered lines for a later write-back. Nothing reaches the
    /// backing store before the adversary drains the queue.
    pub fn clflushopt(&mut self, node: NodeId, offset: u64, len: u64) -> MemResult<()> {
        self.check_bounds(offset, len)?;
        self.record(node, EventKind::Clflushopt, offset, len);
        if self.coherent {
            return Ok(());
        }
        let cache = &mut self.caches[node.index()];
        for line in line_span(offset, len) {
            let dirty = cache.lines.get(&line).is_some_and(|c| c.dirty);
            if dirty && !cache.deferred.contains(&line) {
                cache.deferred.push_back(line);
            }
        }
        Ok(())
    }

    /// Orders the node's accesses. Does not drain queued flushes.
    pub fn fence(&mut self, node: NodeId) {
        self.record(node, EventKind::Fence, 0, 0);
    }

    fn evict(&mut self, node: NodeId, line: u64) {
        let cache = &mut self.caches[node.index()];
        cache.deferred.retain(|&l| l != line);
        if let Some(c) = cache.lines.remove(&line) {
            if c.dirty {
                self.write_backing_line(line, c.data);
            }
        }
    }

    /// All adversary actions currently possible, in a deterministic order.
    pub fn adversary_actions(&self) -> Vec<AdversaryAction> {
        let mut out = Vec::new();
        for (i, cache) in self.caches.iter().enumerate() {
            let node = NodeId(i as u32);
            for &line in &cache.deferred {
                out.push(AdversaryAction::Drain { node, line });
            }
            for (&line, c) in &cache.lines {
                if c.dirty && !cache.deferred.contains(&line) {
                    out.push(AdversaryAction::Writeback { node, line });
                }
            }
        }
        out
    }

    pub fn apply(&mut self, action: AdversaryAction) {
        match action {
            AdversaryAction::Drain { node, line } => {
                self.record(node, EventKind::Drain, line * LINE_SIZE, LINE_SIZE);
                self.evict(node, line);
            }
            AdversaryAction::Writeback { node, line } => {
                self.record(node, EventKind::Writeback, line * LINE_SIZE, LINE_SIZE);
                self.evict(node, line);
            }
            AdversaryAction::Noop => {}
        }
    }

    /// Declare `[0, end)` as metadata; DMA registrations may not overlap it.
    pub fn set_metadata_end(&mut self, end: u64) {
        self.metadata_end = end;
    }

    pub fn mark_dma_only(&mut self, offset: u64, len: u64) -> MemResult<()> {
        self.check_bounds(offset, len)?;
        if len == 0 || offset < self.metadata_end || self.overlaps_dma(offset, len) {
            return Err(MemError::DmaOverlap { offset, len });
        }
        let lines = line_span(offset, len);
        for (i, cache) in self.caches.iter().enumerate() {
            if cache.lines.range(lines.clone()).any(|(_, c)| c.dirty) {
                return Err(MemError::DirtyInPayload { node: NodeId(i as u32), offset, len });
            }
        }
        // Clean copies left over from an earlier use of these lines are
        // unobservable from now on: CPU loads of the range fail.
        for cache in &mut self.caches {
            let doomed: Vec<u64> = cache.lines.range(lines.clone()).map(|(&l, _)| l).collect();
            for l in doomed {
                cache.lines.remove(&l);
            }
        }
        self.dma_ranges.insert(offset, offset + len);
        Ok(())
    }

    pub fn unmark_dma_only(&mut self, offset: u64) -> MemResult<()> {
        self.dma_ranges
            .remove(&offset)
            .map(|_| ())
            .ok_or(MemError::NotDmaRange { offset, len: 0 })
    }

    pub fn is_dma_only(&self, offset: u64, len: u64) -> bool {
        self.inside_dma(offset, len)
    }

    pub fn dma_ranges(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.dma_ranges.iter().map(|(&s, &e)| (s, e))
    }

    fn check_dma(&self, offset: u64, len: u64) -> MemResult<()> {
        self.check_bounds(offset, len)?;
        if !self.inside_dma(offset, len) {
            return Err(MemError::NotDmaRange { offset, len });
        }
        Ok(())
    }

    pub fn dma_write(&mut self, offset: u64, data: &[u8]) -> MemResult<DmaCompletion> {
        let len = data.len() as u64;
        self.check_dma(offset, len)?;
        for line in line_span(offset, len) {
            let mut cur = self.backing_line(line);
            copy_in(line, &mut cur, offset, data);
            self.write_backing_line(line, cur);
            if let Some(ghost) = self.ghost.as_mut() {
                copy_in(line, ghost.entry(line).or_insert(ZERO_LINE), offset, data);
            }
        }
        Ok(DmaCompletion { offset, len })
    }

    /// Completion for a transfer whose bytes are not materialized, used when
    /// only the timing of the payload matters.
    pub fn dma_write_modeled(&mut self, offset: u64, len: u64) -> MemResult<DmaCompletion> {
        self.check_dma(offset, len)?;
        Ok(DmaCompletion { offset, len })
    }

    pub fn dma_read(&self, offset: u64, len: u64) -> MemResult<Vec<u8>> {
        self.check_dma(offset, len)?;
        let mut out = vec![0u8; len as usize];
        if len > 0 {
            for line in line_span(offset, len) {
                copy_out(line, &self.backing_line(line), offset, &mut out);
            }
        }
        Ok(out)
    }

    /// Bytes currently in the backing store, ignoring all caches.
    pub fn backing_bytes(&self, offset: u64, len: u64) -> MemResult<Vec<u8>> {
        self.check_bounds(offset, len)?;
        let mut out = vec![0u8; len as usize];
        if len > 0 {
            for line in line_span(offset, len) {
                copy_out(line, &self.backing_line(line), offset, &mut out);
            }
        }
        Ok(out)
    }

    /// Writes straight into the backing store. Used for region formatting
    /// before any node attaches.
    pub fn format_bytes(&mut self, offset: u64, data: &[u8]) -> MemResult<()> {
        let len = data.len() as u64;
        self.check_bounds(offset, len)?;
        for line in line_span(offset, len) {
            let mut cur = self.backing_line(line);
            copy_in(line, &mut cur, offset, data);
            self.write_backing_line(line, cur);
            if let Some(ghost) = self.ghost.as_mut() {
                copy_in(line, ghost.entry(line).or_insert(ZERO_LINE), offset, data);
            }
        }
        Ok(())
    }

    /// Indices of lines whose backing content is non-zero.
    pub fn populated_lines(&self) -> impl Iterator<Item = (u64, &[u8; 64])> + '_ {
        self.backing.iter().map(|(&l, d)| (l, d))
    }

    pub fn enable_staleness_tracking(&mut self) {
        if self.ghost.is_none() {
            self.ghost = Some(self.backing.clone());
        }
    }

    pub fn take_stale_loads(&mut self) -> Vec<StaleLoad> {
        std::mem::take(&mut self.stale)
    }

    pub fn enable_event_log(&mut self) {
        self.log.get_or_insert_with(Vec::new);
    }

    pub fn take_events(&mut self) -> Vec<MemEvent> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }
}

fn copy_out(line: u64, data: &Line, offset: u64, buf: &mut [u8]) {
    let line_start = line * LINE_SIZE;
    let start = offset.max(line_start);
    let end = (offset + buf.len() as u64).min(line_start + LINE_SIZE);
    let src = &data[(start - line_start) as usize..(end - line_start) as usize];
    buf[(start - offset) as usize..(end - offset) as usize].copy_from_slice(src);
}

fn copy_in(line: u64, data: &mut Line, offset: u64, src: &[u8]) {
    let line_start = line * LINE_SIZE;
    let start = offset.max(line_start);
    let end = (offset + src.len() as u64).min(line_start + LINE_SIZE);
    data[(start - line_start) as usize..(end - line_start) as usize]
        .copy_from_slice(&src[(start - offset) as usize..(end - offset) as usize]);
}

/// Proof that a DMA transfer into a payload range has completed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DmaCompletion {
    pub offset: u64,
    pub len: u64,
}

impl DmaCompletion {
    pub fn covers(&self, offset: u64, len: u64) -> bool {
        self.offset <= offset && offset + len <= self.offset + self.len
    }
}

/// How a protocol makes its metadata writes visible and its reads fresh.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FlushDiscipline {
    /// Synchronous `clflush` after every write and before every read.
    #[default]
    Clflush,
    /// `clflushopt` followed by a fence. Looks equivalent, is not: the flush
    /// is only queued and a clean stale copy is never invalidated.
    ClflushoptFence,
}

impl fmt::Display for FlushDiscipline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlushDiscipline::Clflush => "clflush",
            FlushDiscipline::ClflushoptFence => "clflushopt",
        })
    }
}

impl std::str::FromStr for FlushDiscipline {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "clflush" => Ok(FlushDiscipline::Clflush),
            "clflushopt" | "clflushopt+fence" => Ok(FlushDiscipline::ClflushoptFence),
            _ => Err(format!("unknown flush discipline {s:?} (expected clflush or clflushopt)")),
        }
    }
}

/// Configuration for a [`BackingRegion`].
#[derive(Clone, Debug)]
pub struct RegionConfig {
    pub capacity: u64,
    pub nodes: u32,
    /// Skip the private caches entirely. Used by the serving simulator, where
    /// timing rather than coherence is under test.
    pub coherent: bool,
}

impl RegionConfig {
    pub fn new(capacity: u64, nodes: u32) -> Self {
        Self { capacity, nodes, coherent: false }
    }
}

const DEFAULT_BASE: u64 = 0x7f00_0000_0000;
const BASE_STRIDE: u64 = 0x0040_0000_0000;

struct RegionInner {
    state: Mutex<RegionState>,
    attached: Mutex<Vec<bool>>,
    nodes: u32,
}

/// Shared handle to the emulated device.
#[derive(Clone)]
pub struct BackingRegion {
    inner: Arc<RegionInner>,
}

impl fmt::Debug for BackingRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackingRegion")
            .field("capacity", &self.capacity())
            .field("nodes", &self.inner.nodes)
            .finish()
    }
}

impl BackingRegion {
    pub fn new(config: RegionConfig) -> MemResult<Self> {
        let mut state = RegionState::new(config.capacity, config.nodes)?;
        state.coherent = config.coherent;
        Ok(Self {
            inner: Arc::new(RegionInner {
                state: Mutex::new(state),
                attached: Mutex::new(vec![false; config.nodes as usize]),
                nodes: config.nodes,
            }),
        })
    }

    pub fn capacity(&self) -> u64 {
        self.inner.state.lock().capacity
    }

    pub fn node_count(&self) -> u32 {
        self.inner.nodes
    }

    /// Attach `node` with a default, node-specific simulated base address.
    pub fn attach_node(&self, node: NodeId) -> MemResult<NodeView> {
        self.attach_node_at(node, DEFAULT_BASE + node.0 as u64 * BASE_STRIDE)
    }

    pub fn attach_node_at(&self, node: NodeId, base: u64) -> MemResult<NodeView> {
        if node.0 >= self.inner.nodes {
            return Err(MemError::NodeOutOfRange { node, nodes: self.inner.nodes });
        }
        let mut attached = self.inner.attached.lock();
        if attached[node.index()] {
            return Err(MemError::AlreadyAttached(node));
        }
        attached[node.index()] = true;
        Ok(NodeView { region: self.clone(), node, base })
    }

    /// Run `f` with exclusive access to the device state.
    pub fn with_state<R>(&self, f: impl FnOnce(&mut RegionState) -> R) -> R {
        f(&mut self.inner.state.lock())
    }

    pub fn snapshot(&self) -> RegionState {
        self.inner.state.lock().clone()
    }

    pub fn restore(&self, state: RegionState) {
        *self.inner.state.lock() = state;
    }

    pub fn dma_write(&self, offset: u64, data: &[u8]) -> MemResult<DmaCompletion> {
        self.with_state(|s| s.dma_write(offset, data))
    }

    pub fn dma_write_modeled(&self, offset: u64, len: u64) -> MemResult<DmaCompletion> {
        self.with_state(|s| s.dma_write_modeled(offset, len))
    }

    pub fn dma_read(&self, offset: u64, len: u64) -> MemResult<Vec<u8>> {
        self.with_state(|s| s.dma_read(offset, len))
    }

    pub fn mark_dma_only(&self, offset: u64, len: u64) -> MemResult<()> {
        self.with_state(|s| s.mark_dma_only(offset, len))
    }

    pub fn unmark_dma_only(&self, offset: u64) -> MemResult<()> {
        self.with_state(|s| s.unmark_dma_only(offset))
    }

    pub fn apply(&self, action: AdversaryAction) {
        self.with_state(|s| s.apply(action))
    }

    /// Write the backing store to `path` as raw little-endian bytes, no header.
    /// Unwritten lines become holes in a sparse file.
    pub fn persist(&self, path: &Path) -> MemResult<()> {
        let state = self.snapshot();
        let io = |e: std::io::Error| MemError::Io(e.to_string());
        let mut file = File::create(path).map_err(io)?;
        file.set_len(state.capacity).map_err(io)?;
        for (line, data) in state.populated_lines() {
            file.seek(SeekFrom::Start(line * LINE_SIZE)).map_err(io)?;
            file.write_all(data).map_err(io)?;
        }
        file.flush().map_err(io)
    }
}

/// One node's window onto the device.
///
/// Clones share the node's cache; all threads of a node use clones of the
/// same view.
#[derive(Clone, Debug)]
pub struct NodeView {
    region: BackingRegion,
    node: NodeId,
    base: u64,
}

impl NodeView {
    pub fn node_id(&self) -> NodeId {
        self.node
    }

    pub fn region(&self) -> &BackingRegion {
        &self.region
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn load(&self, offset: u64, buf: &mut [u8]) -> MemResult<()> {
        self.region.with_state(|s| s.load(self.node, offset, buf))
    }

    pub fn store(&self, offset: u64, data: &[u8]) -> MemResult<()> {
        self.region.with_state(|s| s.store(self.node, offset, data))
    }

    pub fn clflush(&self, offset: u64, len: u64) -> MemResult<()> {
        self.region.with_state(|s| s.clflush(self.node, offset, len))
    }

    pub fn clflushopt(&self, offset: u64, len: u64) -> MemResult<()> {
        self.region.with_state(|s| s.clflushopt(self.node, offset, len))
    }

    pub fn fence(&self) {
        self.region.with_state(|s| s.fence(self.node))
    }

    pub fn load_u64(&self, offset: u64) -> MemResult<u64> {
        let mut b = [0u8; 8];
        self.load(offset, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn store_u64(&self, offset: u64, v: u64) -> MemResult<()> {
        self.store(offset, &v.to_le_bytes())
    }

    /// Invalidate then load, so the value comes from the backing store.
    /// Every cross-node poll must go through this.
    pub fn load_fresh(&self, offset: u64, buf: &mut [u8]) -> MemResult<()> {
        self.region.with_state(|s| {
            s.clflush(self.node, offset, buf.len() as u64)?;
            s.load(self.node, offset, buf)
        })
    }

    pub fn load_fresh_u64(&self, offset: u64) -> MemResult<u64> {
        let mut b = [0u8; 8];
        self.load_fresh(offset, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    /// Store, then synchronously flush the touched lines.
    ///
    /// The covered lines are invalidated first so that a partial-line write
    /// never merges into a stale cached copy.
    pub fn store_through(&self, offset: u64, data: &[u8]) -> MemResult<()> {
        let len = data.len() as u64;
        self.clflush(offset, len)?;
        self.store(offset, data)?;
        self.clflush(offset, len)
    }

    pub fn store_through_u64(&self, offset: u64, v: u64) -> MemResult<()> {
        self.store_through(offset, &v.to_le_bytes())
    }

    /// Load under `discipline`. With [`FlushDiscipline::ClflushoptFence`] the
    /// pre-load flush does not invalidate a clean cached copy.
    pub fn load_with(&self, discipline: FlushDiscipline, offset: u64, buf: &mut [u8]) -> MemResult<()> {
        match discipline {
            FlushDiscipline::Clflush => self.load_fresh(offset, buf),
            FlushDiscipline::ClflushoptFence => {
                self.clflushopt(offset, buf.len() as u64)?;
                self.fence();
                self.load(offset, buf)
            }
        }
    }

    pub fn store_with(&self, discipline: FlushDiscipline, offset: u64, data: &[u8]) -> MemResult<()> {
        match discipline {
            FlushDiscipline::Clflush => self.store_through(offset, data),
            FlushDiscipline::ClflushoptFence => {
                let len = data.len() as u64;
                self.clflushopt(offset, len)?;
                self.fence();
                self.store(offset, data)?;
                self.clflushopt(offset, len)?;
                self.fence();
                Ok(())
            }
        }
    }

    pub fn load_u64_with(&self, discipline: FlushDiscipline, offset: u64) -> MemResult<u64> {
        let mut b = [0u8; 8];
        self.load_with(discipline, offset, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn store_u64_with(&self, discipline: FlushDiscipline, offset: u64, v: u64) -> MemResult<()> {
        self.store_with(discipline, offset, &v.to_le_bytes())
    }

    /// Offset to this node's simulated virtual address.
    pub fn to_address(&self, offset: u64) -> MemResult<u64> {
        let cap = self.region.capacity();
        if offset >= cap {
            return Err(MemError::OutOfBounds { offset, len: 0, capacity: cap });
        }
        Ok(self.base + offset)
    }

    /// Simulated virtual address back to an offset.
    pub fn to_offset(&self, address: u64) -> MemResult<u64> {
        let cap = self.region.capacity();
        match address.checked_sub(self.base) {
            Some(off) if off < cap => Ok(off),
            _ => Err(MemError::AddressOutsideMapping(address)),
        }
    }
}

/// How the adversary is driven.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdversaryMode {
    SeededRandom,
    ExhaustiveBounded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversarySchedule {
    pub seed: u64,
    pub mode: AdversaryMode,
    /// Maximum adversary actions along one explored path (exhaustive mode).
    pub bound: usize,
}

impl AdversarySchedule {
    pub fn seeded(seed: u64) -> Self {
        Self { seed, mode: AdversaryMode::SeededRandom, bound: 0 }
    }

    pub fn exhaustive(bound: usize) -> Self {
        Self { seed: 0, mode: AdversaryMode::ExhaustiveBounded, bound }
    }
}

/// Random adversary. Picks uniformly among the currently possible actions
/// plus a no-op.
pub struct Adversary {
    rng: ChaCha8Rng,
}

impl Adversary {
    pub fn new(schedule: AdversarySchedule) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(schedule.seed) }
    }

    pub fn choose(&mut self, state: &RegionState) -> AdversaryAction {
        let actions = state.adversary_actions();
        let pick = self.rng.gen_range(0..=actions.len());
        actions.get(pick).copied().unwrap_or(AdversaryAction::Noop)
    }

    pub fn step(&mut self, region: &BackingRegion) -> AdversaryAction {
        region.with_state(|s| {
            let action = self.choose(s);
            s.apply(action);
            action
        })
    }
}

/// Every adversary action sequence of length at most `bound` from `state`,
/// with the state each one produces. Sequences are pruned once the adversary
/// has nothing left to do.
pub fn exhaustive_sequences(
    state: &RegionState,
    bound: usize,
) -> Vec<(Vec<AdversaryAction>, RegionState)> {
    let mut out = vec![(Vec::new(), state.clone())];
    let mut frontier = vec![(Vec::new(), state.clone())];
    for _ in 0..bound {
        let mut next = Vec::new();
        for (seq, st) in &frontier {
            for a in st.adversary_actions() {
                let mut s2 = st.clone();
                s2.apply(a);
                let mut seq2: Vec<AdversaryAction> = seq.clone();
                seq2.push(a);
                out.push((seq2.clone(), s2.clone()));
                next.push((seq2, s2));
            }
        }
        frontier = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(nodes: u32) -> BackingRegion {
        BackingRegion::new(RegionConfig::new(64 * 1024, nodes)).unwrap()
    }

    #[test]
    fn attach_rules() {
        let r = region(2);
        let v = r.attach_node(NodeId(0)).unwrap();
        assert!(r.snapshot().cache(v.node_id()).is_empty());
        assert_eq!(r.attach_node(NodeId(0)).unwrap_err(), MemError::AlreadyAttached(NodeId(0)));
        assert!(matches!(r.attach_node(NodeId(2)), Err(MemError::NodeOutOfRange { .. })));
    }

    #[test]
    fn capacity_must_be_line_multiple() {
        assert!(BackingRegion::new(RegionConfig::new(100, 1)).is_err());
        assert!(BackingRegion::new(RegionConfig::new(0, 1)).is_err());
    }

    #[test]
    fn unflushed_store_is_invisible_remotely() {
        let r = region(2);
        let a = r.attach_node(NodeId(0)).unwrap();
        let b = r.attach_node(NodeId(1)).unwrap();
        a.store_u64(128, 7).unwrap();
        assert_eq!(a.load_u64(128).unwrap(), 7);
        assert_eq!(b.load_u64(128).unwrap(), 0);
    }

    #[test]
    fn clflush_then_fresh_load_is_visible() {
        let r = region(2);
        let a = r.attach_node(NodeId(0)).unwrap();
        let b = r.attach_node(NodeId(1)).unwrap();
        assert_eq!(b.load_u64(128).unwrap(), 0); // b now caches the old line
        a.store_u64(128, 7).unwrap();
        a.clflush(128, 8).unwrap();
        assert_eq!(b.load_u64(128).unwrap(), 0, "stale copy still cached");
        b.clflush(128, 8).unwrap();
        assert_eq!(b.load_u64(128).unwrap(), 7);
    }

    #[test]
    fn clflush_of_clean_line_refetches() {
        let r = region(2);
        let a = r.attach_node(NodeId(0)).unwrap();
        let b = r.attach_node(NodeId(1)).unwrap();
        a.load_u64(0).unwrap();
        b.store_through_u64(0, 9).unwrap();
        a.clflush(0, 8).unwrap();
        assert!(r.snapshot().cache(NodeId(0)).cached_lines().next().is_none());
        assert_eq!(a.load_u64(0).unwrap(), 9);
    }

    #[test]
    fn clflush_rounds_to_lines() {
        let r = region(1);
        let a = r.attach_node(NodeId(0)).unwrap();
        for off in (0..512).step_by(64) {
            a.load_u64(off).unwrap();
        }
        // [60, 160) covers lines 0, 1, 2.
        a.clflush(60, 100).unwrap();
        let left: Vec<u64> = r.snapshot().cache(NodeId(0)).cached_lines().map(|(l, _)| l).collect();
        assert_eq!(left, vec![3, 4, 5, 6, 7]);
        // [64, 164) covers lines 1, 2 only once realigned.
        for off in (0..512).step_by(64) {
            a.load_u64(off).unwrap();
        }
        a.clflush(64, 100).unwrap();
        let left: Vec<u64> = r.snapshot().cache(NodeId(0)).cached_lines().map(|(l, _)| l).collect();
        assert_eq!(left, vec![0, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn clflushopt_leaves_backing_untouched_until_drained() {
        let r = region(2);
        let a = r.attach_node(NodeId(0)).unwrap();
        let b = r.attach_node(NodeId(1)).unwrap();
        a.store_u64(64, 5).unwrap();
        a.clflushopt(64, 8).unwrap();
        a.fence();
        b.clflush(64, 8).unwrap();
        assert_eq!(b.load_u64(64).unwrap(), 0, "pending flush not yet visible");
        let actions = r.snapshot().adversary_actions();
        assert_eq!(actions, vec![AdversaryAction::Drain { node: NodeId(0), line: 1 }]);
        r.apply(actions[0]);
        b.clflush(64, 8).unwrap();
        assert_eq!(b.load_u64(64).unwrap(), 5);
    }

    #[test]
    fn clflushopt_of_clean_uncached_line_is_noop() {
        let r = region(1);
        let a = r.attach_node(NodeId(0)).unwrap();
        let before = r.snapshot();
        a.clflushopt(0, 64).unwrap();
        a.fence();
        assert_eq!(r.snapshot(), before);
    }

    #[test]
    fn clflush_then_fence_is_visible() {
        let r = region(2);
        let a = r.attach_node(NodeId(0)).unwrap();
        let b = r.attach_node(NodeId(1)).unwrap();
        a.store_u64(0, 3).unwrap();
        a.clflush(0, 8).unwrap();
        a.fence();
        assert_eq!(b.load_fresh_u64(0).unwrap(), 3);
    }

    #[test]
    fn spontaneous_writeback_exposes_unflushed_store() {
        let r = region(2);
        let a = r.attach_node(NodeId(0)).unwrap();
        let b = r.attach_node(NodeId(1)).unwrap();
        a.store_u64(0, 11).unwrap();
        r.apply(AdversaryAction::Writeback { node: NodeId(0), line: 0 });
        assert_eq!(b.load_u64(0).unwrap(), 11);
    }

    #[test]
    fn dma_rules() {
        let r = region(1);
        let a = r.attach_node(NodeId(0)).unwrap();
        r.with_state(|s| s.set_metadata_end(4096));
        assert!(matches!(r.mark_dma_only(0, 1024), Err(MemError::DmaOverlap { .. })));
        r.mark_dma_only(8192, 1024).unwrap();
        assert!(r.mark_dma_only(8192 + 512, 1024).is_err());
        let payload: Vec<u8> = (0..1024).map(|i| (i * 7) as u8).collect();
        let done = r.dma_write(8192, &payload).unwrap();
        assert!(done.covers(8192, 1024));
        assert_eq!(r.dma_read(8192, 1024).unwrap(), payload);
        assert!(matches!(r.dma_write(0, &[1]), Err(MemError::NotDmaRange { .. })));
        let mut buf = [0u8; 8];
        assert!(matches!(a.load(8192, &mut buf), Err(MemError::DmaOnly { .. })));
        assert!(matches!(a.store(8192 + 1000, &[0; 32]), Err(MemError::DmaOnly { .. })));
        r.unmark_dma_only(8192).unwrap();
        a.load(8192, &mut buf).unwrap();
    }

    #[test]
    fn mark_dma_rejects_dirty_lines() {
        let r = region(1);
        let a = r.attach_node(NodeId(0)).unwrap();
        a.store_u64(8192, 1).unwrap();
        assert!(matches!(r.mark_dma_only(8192, 64), Err(MemError::DirtyInPayload { .. })));
        a.clflush(8192, 64).unwrap();
        a.load_u64(8192).unwrap();
        r.mark_dma_only(8192, 64).unwrap();
        assert!(r.snapshot().cache(NodeId(0)).cached_lines().next().is_none());
    }

    #[test]
    fn out_of_bounds() {
        let r = region(1);
        let a = r.attach_node(NodeId(0)).unwrap();
        let cap = r.capacity();
        assert!(matches!(a.store(cap - 4, &[0; 8]), Err(MemError::OutOfBounds { .. })));
        assert!(matches!(a.clflush(cap, 1), Err(MemError::OutOfBounds { .. })));
        assert!(a.to_address(cap).is_err());
        assert_eq!(a.to_address(0).unwrap(), a.base());
        assert!(a.to_offset(a.base() - 1).is_err());
    }

    #[test]
    fn coherent_mode_passes_through() {
        let r = BackingRegion::new(RegionConfig { capacity: 4096, nodes: 2, coherent: true }).unwrap();
        let a = r.attach_node(NodeId(0)).unwrap();
        let b = r.attach_node(NodeId(1)).unwrap();
        a.store_u64(0, 42).unwrap();
        assert_eq!(b.load_u64(0).unwrap(), 42);
        assert!(r.snapshot().cache(NodeId(0)).is_empty());
    }

    #[test]
    fn staleness_ghost_flags_stale_loads() {
        let r = region(2);
        r.with_state(|s| s.enable_staleness_tracking());
        let a = r.attach_node(NodeId(0)).unwrap();
        let b = r.attach_node(NodeId(1)).unwrap();
        a.store_u64(0, 1).unwrap();
        b.load_u64(0).unwrap();
        assert_eq!(r.with_state(|s| s.take_stale_loads()).len(), 1);
        a.clflush(0, 8).unwrap();
        b.load_fresh_u64(0).unwrap();
        assert!(r.with_state(|s| s.take_stale_loads()).is_empty());
    }

    #[test]
    fn seeded_adversary_is_deterministic() {
        let run = |seed| {
            let r = region(2);
            let a = r.attach_node(NodeId(0)).unwrap();
            let b = r.attach_node(NodeId(1)).unwrap();
            let mut adv = Adversary::new(AdversarySchedule::seeded(seed));
            let mut trace = Vec::new();
            for i in 0..200u64 {
                a.store_u64((i % 16) * 64, i).unwrap();
                if i % 3 == 0 {
                    b.store_u64((i % 8) * 64 + 8, i).unwrap();
                    b.clflushopt((i % 8) * 64, 64).unwrap();
                }
                trace.push(adv.step(&r));
            }
            (trace, r.snapshot())
        };
        let (t1, s1) = run(9);
        let (t2, s2) = run(9);
        assert_eq!(t1, t2);
        assert_eq!(s1, s2);
        assert_eq!(s1.backing_bytes(0, 4096).unwrap(), s2.backing_bytes(0, 4096).unwrap());
    }

    #[test]
    fn exhaustive_enumeration_counts_sequences() {
        let r = region(2);
        let a = r.attach_node(NodeId(0)).unwrap();
        a.store_u64(0, 1).unwrap();
        a.store_u64(64, 1).unwrap();
        // Two independent dirty lines: sequences of length <= 2 are
        // [], [x], [y], [x, y], [y, x].
        let seqs = exhaustive_sequences(&r.snapshot(), 2);
        assert_eq!(seqs.len(), 5);
    }

    #[test]
    fn persist_writes_raw_bytes() {
        let r = region(1);
        let a = r.attach_node(NodeId(0)).unwrap();
        a.store_through_u64(4096, 0x0102_0304_0506_0708).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("region.bin");
        r.persist(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len() as u64, r.capacity());
        assert_eq!(&bytes[4096..4104], &0x0102_0304_0506_0708u64.to_le_bytes());
        assert!(bytes[..4096].iter().all(|&b| b == 0));
    }
}
