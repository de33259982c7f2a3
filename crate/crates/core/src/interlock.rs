//! Two-tier inter-node locking.
//!
//! A thread first takes its node's local lock for the lock id, so at most one
//! thread per node ever competes globally. It then marks its node's slot in
//! the shared lock entry WAITING and polls it. A single manager scans the
//! entries and turns one WAITING slot into LOCKED whenever no slot of that
//! entry is LOCKED. Release writes IDLE, then drops the local lock.
//!
//! Every slot write is followed by a synchronous flush, and every slot read
//! is preceded by an invalidation. Each slot has a cacheline to itself.

use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::{Condvar, Mutex};
use serde::Serialize;
use thiserror::Error;

use crate::memory::{thread_tag, EventKind, MemError, MemEvent, NodeId, LINE_SIZE};
use crate::shm::{ManagerMode, Shm, ShmNode};

/// Passes an entry may stay LOCKED by the same node before the manager counts
/// it as possibly stuck.
const STUCK_PASSES: u32 = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum SlotState {
    Idle,
    Waiting,
    Locked,
}

impl SlotState {
    pub fn encode(self) -> u64 {
        match self {
            SlotState::Idle => 0,
            SlotState::Waiting => 1,
            SlotState::Locked => 2,
        }
    }

    pub fn decode(v: u64) -> Self {
        match v {
            1 => SlotState::Waiting,
            2 => SlotState::Locked,
            _ => SlotState::Idle,
        }
    }

    pub fn letter(self) -> char {
        match self {
            SlotState::Idle => 'I',
            SlotState::Waiting => 'W',
            SlotState::Locked => 'L',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LockError {
    #[error("lock table exhausted")]
    Exhausted,
    #[error("lock {0} is not allocated")]
    Unallocated(u32),
    #[error("lock {0} is already held by this thread")]
    AlreadyHeld(u32),
    #[error("lock {0} is not held by this thread")]
    NotHeld(u32),
    #[error("lock {0} is in use")]
    InUse(u32),
    #[error(transparent)]
    Mem(#[from] MemError),
}

/// A user-allocated inter-node lock.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct LockHandle(pub(crate) u32);

impl LockHandle {
    pub fn id(self) -> u32 {
        self.0
    }

    /// Rebuild a handle from an id read out of shared memory.
    pub fn from_id(id: u32) -> Self {
        LockHandle(id)
    }
}

struct LocalLock {
    holder: Mutex<Option<u64>>,
    released: Condvar,
}

/// A node's DRAM-resident locks, indexed like the global table.
pub(crate) struct LocalLockTable {
    locks: Vec<LocalLock>,
}

impl LocalLockTable {
    pub(crate) fn new(n: u32) -> Self {
        Self {
            locks: (0..n)
                .map(|_| LocalLock { holder: Mutex::new(None), released: Condvar::new() })
                .collect(),
        }
    }

    fn lock(&self, id: u32) -> Result<(), LockError> {
        let me = thread_tag();
        let l = &self.locks[id as usize];
        let mut holder = l.holder.lock();
        if *holder == Some(me) {
            return Err(LockError::AlreadyHeld(id));
        }
        while holder.is_some() {
            l.released.wait(&mut holder);
        }
        *holder = Some(me);
        Ok(())
    }

    fn check_held(&self, id: u32) -> Result<(), LockError> {
        if *self.locks[id as usize].holder.lock() == Some(thread_tag()) {
            Ok(())
        } else {
            Err(LockError::NotHeld(id))
        }
    }

    fn unlock(&self, id: u32) {
        let l = &self.locks[id as usize];
        *l.holder.lock() = None;
        l.released.notify_one();
    }

    fn is_free(&self, id: u32) -> bool {
        self.locks[id as usize].holder.lock().is_none()
    }
}

/// Manager-side bookkeeping, resident on node 0.
///
/// Only the round-robin cursors and the cached allocation map take part in
/// equality; the counters are diagnostics.
#[derive(Clone, Debug)]
pub struct ManagerState {
    last_grantee: Vec<Option<u32>>,
    allocated: Vec<bool>,
    generation: u64,
    streak: Vec<(Option<u32>, u32)>,
    pub grants: u64,
    pub passes: u64,
    /// Entries seen LOCKED by the same node for a very long time.
    pub stuck_observations: u64,
}

impl PartialEq for ManagerState {
    fn eq(&self, o: &Self) -> bool {
        self.last_grantee == o.last_grantee
            && self.allocated == o.allocated
            && self.generation == o.generation
    }
}

impl Eq for ManagerState {}

impl Hash for ManagerState {
    fn hash<H: Hasher>(&self, h: &mut H) {
        self.last_grantee.hash(h);
        self.allocated.hash(h);
        self.generation.hash(h);
    }
}

impl ManagerState {
    pub(crate) fn new(entries: u32) -> Self {
        Self {
            last_grantee: vec![None; entries as usize],
            allocated: vec![false; entries as usize],
            // Forces a full reload of the allocation map on the first pass.
            generation: u64::MAX,
            streak: vec![(None, 0); entries as usize],
            grants: 0,
            passes: 0,
            stuck_observations: 0,
        }
    }
}

/// One recorded slot transition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SlotTransition {
    pub lock_id: u32,
    pub node_id: u32,
    pub state: SlotState,
    pub logical_time: u64,
}

#[derive(Default, Debug)]
pub(crate) struct SlotTrace {
    clock: u64,
    events: Vec<SlotTransition>,
}

/// Render transitions as `lock_id,node_id,state,logical_time` CSV.
pub fn transitions_to_csv(events: &[SlotTransition]) -> String {
    let mut out = String::from("lock_id,node_id,state,logical_time\n");
    for e in events {
        out.push_str(&format!("{},{},{},{}\n", e.lock_id, e.node_id, e.state.letter(), e.logical_time));
    }
    out
}

/// Check that every store to a watched line is immediately followed, in the
/// storing thread's program order, by a `clflush` covering that line.
pub fn verify_flush_discipline(
    events: &[MemEvent],
    watched: impl Fn(u64) -> bool,
) -> Result<usize, String> {
    use std::collections::HashMap;
    let mut pending: HashMap<u64, &MemEvent> = HashMap::new();
    let mut checked = 0;
    for e in events {
        if let Some(store) = pending.remove(&e.thread) {
            let ok = e.kind == EventKind::Clflush
                && e.first_line <= store.first_line
                && e.last_line >= store.last_line;
            if !ok {
                return Err(format!(
                    "{} thread {} stored lines {}..={} and then did {:?} instead of clflush",
                    store.node, store.thread, store.first_line, store.last_line, e.kind
                ));
            }
            checked += 1;
        }
        if e.kind == EventKind::Store && (e.first_line..=e.last_line).any(&watched) {
            pending.insert(e.thread, e);
        }
    }
    if let Some(store) = pending.values().next() {
        return Err(format!("{} thread {} ended with an unflushed store", store.node, store.thread));
    }
    Ok(checked)
}

impl Shm {
    fn record(&self, lock_id: u32, node: NodeId, state: SlotState) {
        if let Some(t) = &self.trace {
            let mut t = t.lock();
            let logical_time = t.clock;
            t.clock += 1;
            t.events.push(SlotTransition { lock_id, node_id: node.0, state, logical_time });
        }
    }

    pub fn slot_transitions(&self) -> Vec<SlotTransition> {
        self.trace.as_ref().map(|t| t.lock().events.clone()).unwrap_or_default()
    }

    /// Read every slot of `lock` through the manager's view.
    fn read_slots(&self, lock: u32) -> Result<Vec<SlotState>, MemError> {
        let view = &self.views[0];
        (0..self.layout.nodes)
            .map(|n| {
                view.load_fresh_u64(self.layout.lock_slot(lock, NodeId(n))).map(SlotState::decode)
            })
            .collect()
    }

    fn scan_entry(&self, m: &mut ManagerState, lock: u32) -> Result<Option<NodeId>, MemError> {
        let slots = self.read_slots(lock)?;
        let i = lock as usize;
        if let Some(holder) = slots.iter().position(|&s| s == SlotState::Locked) {
            let holder = holder as u32;
            let streak = &mut m.streak[i];
            if streak.0 == Some(holder) {
                streak.1 = streak.1.saturating_add(1);
                if streak.1 == STUCK_PASSES {
                    m.stuck_observations += 1;
                }
            } else {
                *streak = (Some(holder), 0);
            }
            return Ok(None);
        }
        m.streak[i] = (None, 0);
        let n = self.layout.nodes;
        let start = m.last_grantee[i].map_or(0, |g| (g + 1) % n);
        let Some(winner) = (0..n).map(|k| (start + k) % n).find(|&k| slots[k as usize] == SlotState::Waiting)
        else {
            return Ok(None);
        };
        let node = NodeId(winner);
        self.views[0].store_through_u64(self.layout.lock_slot(lock, node), SlotState::Locked.encode())?;
        self.record(lock, node, SlotState::Locked);
        m.last_grantee[i] = Some(winner);
        m.grants += 1;
        Ok(Some(node))
    }

    fn refresh_allocation(&self, m: &mut ManagerState) -> Result<(), MemError> {
        let view = &self.views[0];
        let generation = view.load_fresh_u64(self.layout.lock_generation)?;
        if generation != m.generation {
            for lock in 0..self.layout.total_locks {
                m.allocated[lock as usize] = view.load_fresh_u64(self.layout.lock_entry(lock))? != 0;
            }
            m.generation = generation;
        }
        Ok(())
    }

    /// One manager pass over every allocated entry. Returns the grants made.
    pub fn manager_step(&self) -> Result<Vec<(u32, NodeId)>, MemError> {
        let mut m = self.manager.lock();
        m.passes += 1;
        self.refresh_allocation(&mut m)?;
        let mut grants = Vec::new();
        for lock in 0..self.layout.total_locks {
            if m.allocated[lock as usize] {
                if let Some(node) = self.scan_entry(&mut m, lock)? {
                    grants.push((lock, node));
                }
            }
        }
        Ok(grants)
    }

    /// Scan a single entry, as an inline waiter does.
    pub fn manager_scan(&self, lock: u32) -> Result<Option<NodeId>, MemError> {
        let mut m = self.manager.lock();
        self.scan_entry(&mut m, lock)
    }

    pub fn manager_stats(&self) -> (u64, u64, u64) {
        let m = self.manager.lock();
        (m.passes, m.grants, m.stuck_observations)
    }

    /// Start the dedicated manager thread. It stops when the handle drops.
    pub fn spawn_manager(self: &std::sync::Arc<Self>) -> ManagerThread {
        let stop = std::sync::Arc::new(std::sync::atomic::AtomicBool::new(false));
        let shm = std::sync::Arc::clone(self);
        let flag = std::sync::Arc::clone(&stop);
        let handle = std::thread::Builder::new()
            .name("lock-manager".into())
            .spawn(move || {
                while !flag.load(Ordering::Relaxed) {
                    if let Ok(grants) = shm.manager_step() {
                        if grants.is_empty() {
                            std::thread::yield_now();
                        }
                    }
                }
            })
            .expect("spawn lock manager");
        ManagerThread { stop, handle: Some(handle) }
    }
}

/// Running dedicated manager.
pub struct ManagerThread {
    stop: std::sync::Arc<std::sync::atomic::AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl Drop for ManagerThread {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl fmt::Debug for ManagerThread {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ManagerThread")
    }
}

/// Holds a lock until dropped or explicitly released.
pub struct LockGuard<'a> {
    node: &'a ShmNode,
    lock: u32,
    armed: bool,
}

impl LockGuard<'_> {
    pub fn release(mut self) -> Result<(), LockError> {
        self.armed = false;
        self.node.release_id(self.lock)
    }
}

impl Drop for LockGuard<'_> {
    fn drop(&mut self) {
        if self.armed {
            let _ = self.node.release_id(self.lock);
        }
    }
}

impl ShmNode {
    fn is_allocated(&self, lock: u32) -> Result<bool, MemError> {
        Ok(self.view.load_fresh_u64(self.shm.layout.lock_entry(lock))? != 0)
    }

    fn check_user_lock(&self, h: LockHandle) -> Result<(), LockError> {
        if h.0 >= self.shm.layout.user_locks || !self.is_allocated(h.0)? {
            return Err(LockError::Unallocated(h.0));
        }
        Ok(())
    }

    fn bump_generation(&self) -> Result<(), MemError> {
        let off = self.shm.layout.lock_generation;
        let g = self.view.load_fresh_u64(off)?;
        self.view.store_through_u64(off, g.wrapping_add(1))
    }

    /// Allocate the lowest free user lock.
    pub fn allocate_lock(&self) -> Result<LockHandle, LockError> {
        let _g = self.lock_id(self.shm.layout.bootstrap_lock())?;
        for lock in 0..self.shm.layout.user_locks {
            if !self.is_allocated(lock)? {
                for n in 0..self.shm.layout.nodes {
                    let slot = self.shm.layout.lock_slot(lock, NodeId(n));
                    self.view.store_through_u64(slot, SlotState::Idle.encode())?;
                }
                self.view.store_through_u64(self.shm.layout.lock_entry(lock), 1)?;
                self.bump_generation()?;
                return Ok(LockHandle(lock));
            }
        }
        Err(LockError::Exhausted)
    }

    pub fn free_lock(&self, h: LockHandle) -> Result<(), LockError> {
        let _g = self.lock_id(self.shm.layout.bootstrap_lock())?;
        self.check_user_lock(h)?;
        if !self.local().locks.is_free(h.0) {
            return Err(LockError::InUse(h.0));
        }
        for n in 0..self.shm.layout.nodes {
            let slot = self.shm.layout.lock_slot(h.0, NodeId(n));
            if SlotState::decode(self.view.load_fresh_u64(slot)?) != SlotState::Idle {
                return Err(LockError::InUse(h.0));
            }
        }
        self.view.store_through_u64(self.shm.layout.lock_entry(h.0), 0)?;
        self.bump_generation()?;
        Ok(())
    }

    /// Read this node's slot for `lock` from the backing store.
    pub fn slot_state(&self, lock: u32) -> Result<SlotState, MemError> {
        let off = self.shm.layout.lock_slot(lock, self.node_id());
        Ok(SlotState::decode(self.view.load_fresh_u64(off)?))
    }

    /// Write this node's slot for `lock` and flush it.
    pub fn set_slot(&self, lock: u32, state: SlotState) -> Result<(), MemError> {
        let off = self.shm.layout.lock_slot(lock, self.node_id());
        self.view.store_through_u64(off, state.encode())?;
        self.shm.record(lock, self.node_id(), state);
        Ok(())
    }

    pub(crate) fn acquire_id(&self, lock: u32) -> Result<(), LockError> {
        self.local().locks.lock(lock)?;
        if let Err(e) = self.set_slot(lock, SlotState::Waiting) {
            self.local().locks.unlock(lock);
            return Err(e.into());
        }
        let inline = self.shm.config.manager == ManagerMode::Inline;
        loop {
            if self.slot_state(lock)? == SlotState::Locked {
                break;
            }
            if inline {
                self.shm.manager_scan(lock)?;
            }
            std::thread::yield_now();
        }
        self.local().global_acquires.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    pub(crate) fn release_id(&self, lock: u32) -> Result<(), LockError> {
        self.local().locks.check_held(lock)?;
        self.set_slot(lock, SlotState::Idle)?;
        self.local().locks.unlock(lock);
        Ok(())
    }

    pub(crate) fn lock_id(&self, lock: u32) -> Result<LockGuard<'_>, LockError> {
        self.acquire_id(lock)?;
        Ok(LockGuard { node: self, lock, armed: true })
    }

    pub fn acquire(&self, h: LockHandle) -> Result<(), LockError> {
        self.check_user_lock(h)?;
        self.acquire_id(h.0)
    }

    pub fn release(&self, h: LockHandle) -> Result<(), LockError> {
        self.release_id(h.0)
    }

    /// Acquire `h` and release it when the guard drops.
    pub fn lock(&self, h: LockHandle) -> Result<LockGuard<'_>, LockError> {
        self.check_user_lock(h)?;
        self.lock_id(h.0)
    }

    /// Lines holding slot state, for trace checking.
    pub fn is_slot_line(&self, line: u64) -> bool {
        let l = &self.shm.layout;
        let off = line * LINE_SIZE;
        if off < l.lock_table || off >= l.lock_entry(l.total_locks) {
            return false;
        }
        !(off - l.lock_table).is_multiple_of(l.lock_entry_stride)
    }
}

/// Counter shared by the stress helpers below.
static STRESS_RUNS: AtomicU64 = AtomicU64::new(0);

/// Outcome of [`stress_counter`].
#[derive(Clone, Debug, Serialize)]
pub struct StressReport {
    pub nodes: u32,
    pub threads_per_node: u32,
    pub iterations: u32,
    pub expected: u64,
    pub observed: u64,
    pub adversary_actions: u64,
    pub manager_grants: u64,
    pub flush_discipline_checked: Option<usize>,
    pub elapsed_ms: u128,
}

impl StressReport {
    pub fn passed(&self) -> bool {
        self.expected == self.observed
    }
}

/// Run `nodes × threads` real threads, each incrementing a shared counter
/// `iters` times under one inter-node lock, with a seeded adversary thread
/// injecting write-backs and drains. Optionally verifies the slot flush
/// discipline from the memory event log.
pub fn stress_counter(
    nodes: u32,
    threads: u32,
    iters: u32,
    seed: u64,
    check_trace: bool,
) -> Result<StressReport, LockError> {
    use crate::memory::{Adversary, AdversarySchedule};
    use crate::shm::ShmConfig;
    use std::sync::atomic::AtomicBool;
    use std::sync::Arc;

    STRESS_RUNS.fetch_add(1, Ordering::Relaxed);
    let started = std::time::Instant::now();
    let shm = Shm::create(ShmConfig {
        capacity: 16 << 20,
        nodes,
        lock_entries: 4,
        object_buckets: 16,
        chunk_size: 1 << 20,
        remote_ring_slots: 16,
        manager: ManagerMode::Dedicated,
        ..ShmConfig::default()
    })
    .map_err(|e| LockError::Mem(MemError::Io(e.to_string())))?;
    if check_trace {
        shm.region().with_state(|s| s.enable_event_log());
    }
    let manager = shm.spawn_manager();
    let n0 = shm.join(NodeId(0))?;
    let lock = n0.allocate_lock()?;
    // The counter gets a line of its own, away from every lock slot.
    let counter = shm.layout().metadata_end.div_ceil(LINE_SIZE) * LINE_SIZE;

    let stop = Arc::new(AtomicBool::new(false));
    let adv_actions = Arc::new(AtomicU64::new(0));
    let adversary = {
        let region = shm.region().clone();
        let stop = Arc::clone(&stop);
        let count = Arc::clone(&adv_actions);
        std::thread::spawn(move || {
            let mut adv = Adversary::new(AdversarySchedule::seeded(seed));
            while !stop.load(Ordering::Relaxed) {
                if adv.step(&region) != crate::memory::AdversaryAction::Noop {
                    count.fetch_add(1, Ordering::Relaxed);
                }
                std::thread::yield_now();
            }
        })
    };

    let mut workers = Vec::new();
    for n in 0..nodes {
        for _ in 0..threads {
            let node = shm.join(NodeId(n))?;
            workers.push(std::thread::spawn(move || -> Result<(), LockError> {
                for _ in 0..iters {
                    let g = node.lock(lock)?;
                    let v = node.view().load_fresh_u64(counter)?;
                    node.view().store_through_u64(counter, v + 1)?;
                    g.release()?;
                }
                Ok(())
            }));
        }
    }
    let mut first_err = None;
    for w in workers {
        if let Err(e) = w.join().expect("worker panicked") {
            first_err.get_or_insert(e);
        }
    }
    stop.store(true, Ordering::Relaxed);
    adversary.join().expect("adversary panicked");
    drop(manager);
    if let Some(e) = first_err {
        return Err(e);
    }
    let observed = n0.view().load_fresh_u64(counter)?;
    let flush_discipline_checked = if check_trace {
        let events = shm.region().with_state(|s| s.take_events());
        Some(
            verify_flush_discipline(&events, |l| n0.is_slot_line(l))
                .map_err(|e| LockError::Mem(MemError::Io(e)))?,
        )
    } else {
        None
    };
    Ok(StressReport {
        nodes,
        threads_per_node: threads,
        iterations: iters,
        expected: nodes as u64 * threads as u64 * iters as u64,
        observed,
        adversary_actions: adv_actions.load(Ordering::Relaxed),
        manager_grants: shm.manager_stats().1,
        flush_discipline_checked,
        elapsed_ms: started.elapsed().as_millis(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shm::ShmConfig;
    use std::collections::BTreeSet;
    use std::sync::Arc;

    fn small(nodes: u32, trace: bool) -> Arc<Shm> {
        Shm::create(ShmConfig {
            capacity: 8 << 20,
            nodes,
            lock_entries: 4,
            object_buckets: 16,
            chunk_size: 1 << 20,
            remote_ring_slots: 16,
            trace_locks: trace,
            ..ShmConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn first_allocation_is_lock_zero_and_table_exhausts() {
        let shm = small(2, false);
        let n = shm.join(NodeId(1)).unwrap();
        let ids: Vec<u32> = (0..4).map(|_| n.allocate_lock().unwrap().id()).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
        assert_eq!(n.allocate_lock(), Err(LockError::Exhausted));
    }

    #[test]
    fn allocate_free_matches_set_oracle() {
        use rand::{Rng, SeedableRng};
        let shm = small(2, false);
        let n = shm.join(NodeId(0)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut oracle: BTreeSet<u32> = BTreeSet::new();
        for _ in 0..200 {
            if rng.gen_bool(0.6) {
                let expect = (0..4).find(|i| !oracle.contains(i));
                match (n.allocate_lock(), expect) {
                    (Ok(h), Some(e)) => {
                        assert_eq!(h.id(), e);
                        oracle.insert(e);
                    }
                    (Err(LockError::Exhausted), None) => {}
                    (got, want) => panic!("allocate {got:?} vs oracle {want:?}"),
                }
            } else if let Some(&id) = oracle.iter().next() {
                n.free_lock(LockHandle(id)).unwrap();
                oracle.remove(&id);
            }
        }
    }

    #[test]
    fn single_node_slot_trace() {
        let shm = small(2, true);
        let n = shm.join(NodeId(1)).unwrap();
        let h = n.allocate_lock().unwrap();
        let before = shm.slot_transitions().len();
        n.acquire(h).unwrap();
        assert_eq!(n.slot_state(h.id()).unwrap(), SlotState::Locked);
        n.release(h).unwrap();
        assert_eq!(n.slot_state(h.id()).unwrap(), SlotState::Idle);
        let states: Vec<char> = shm.slot_transitions()[before..]
            .iter()
            .filter(|t| t.lock_id == h.id())
            .map(|t| t.state.letter())
            .collect();
        assert_eq!(states, vec!['W', 'L', 'I']);
        let csv = transitions_to_csv(&shm.slot_transitions());
        assert!(csv.starts_with("lock_id,node_id,state,logical_time\n"));
    }

    #[test]
    fn release_and_free_errors() {
        let shm = small(2, false);
        let n = shm.join(NodeId(0)).unwrap();
        let h = n.allocate_lock().unwrap();
        assert_eq!(n.release(h), Err(LockError::NotHeld(h.id())));
        n.acquire(h).unwrap();
        assert_eq!(n.acquire(h), Err(LockError::AlreadyHeld(h.id())));
        assert_eq!(n.free_lock(h), Err(LockError::InUse(h.id())));
        n.release(h).unwrap();
        assert_eq!(n.release(h), Err(LockError::NotHeld(h.id())));
        n.free_lock(h).unwrap();
        assert_eq!(n.acquire(h), Err(LockError::Unallocated(h.id())));
        assert_eq!(n.free_lock(h), Err(LockError::Unallocated(h.id())));
        assert_eq!(n.allocate_lock().unwrap(), h);
    }

    #[test]
    fn manager_grants_one_waiter_per_entry() {
        let shm = small(3, false);
        let n1 = shm.join(NodeId(1)).unwrap();
        let n2 = shm.join(NodeId(2)).unwrap();
        let h = n1.allocate_lock().unwrap();
        n1.set_slot(h.id(), SlotState::Waiting).unwrap();
        n2.set_slot(h.id(), SlotState::Waiting).unwrap();
        let grants = shm.manager_step().unwrap();
        let for_h: Vec<_> = grants.iter().filter(|g| g.0 == h.id()).collect();
        assert_eq!(for_h.len(), 1);
        // One slot is now LOCKED, so the next pass grants nothing.
        assert!(shm.manager_step().unwrap().iter().all(|g| g.0 != h.id()));
    }

    #[test]
    fn round_robin_is_fair_under_contention() {
        let shm = small(3, false);
        let n1 = shm.join(NodeId(1)).unwrap();
        let n2 = shm.join(NodeId(2)).unwrap();
        let h = n1.allocate_lock().unwrap();
        let mut counts = [0u32; 3];
        n1.set_slot(h.id(), SlotState::Waiting).unwrap();
        n2.set_slot(h.id(), SlotState::Waiting).unwrap();
        for _ in 0..100 {
            let grants = shm.manager_step().unwrap();
            let (_, who) = *grants.iter().find(|g| g.0 == h.id()).expect("a grant");
            counts[who.index()] += 1;
            // Winner releases and immediately re-queues.
            let winner = if who == NodeId(1) { &n1 } else { &n2 };
            winner.set_slot(h.id(), SlotState::Idle).unwrap();
            winner.set_slot(h.id(), SlotState::Waiting).unwrap();
        }
        assert!((49..=51).contains(&counts[1]), "{counts:?}");
        assert!((49..=51).contains(&counts[2]), "{counts:?}");
    }

    #[test]
    fn waiter_is_granted_within_node_count_passes() {
        let shm = small(4, false);
        let nodes: Vec<_> = (0..4).map(|i| shm.join(NodeId(i)).unwrap()).collect();
        let h = nodes[0].allocate_lock().unwrap();
        for n in &nodes {
            n.set_slot(h.id(), SlotState::Waiting).unwrap();
        }
        let mut granted = BTreeSet::new();
        for _ in 0..4 {
            let (_, who) = *shm.manager_step().unwrap().iter().find(|g| g.0 == h.id()).unwrap();
            granted.insert(who);
            nodes[who.index()].set_slot(h.id(), SlotState::Idle).unwrap();
        }
        assert_eq!(granted.len(), 4);
    }

    #[test]
    fn small_threaded_stress_with_trace_check() {
        let r = stress_counter(2, 2, 100, 5, true).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.flush_discipline_checked.unwrap() > 0);
    }

    #[test]
    fn trace_checker_rejects_missing_flush() {
        let e = |kind, line| MemEvent { node: NodeId(0), thread: 1, kind, first_line: line, last_line: line };
        let good = vec![e(EventKind::Store, 5), e(EventKind::Clflush, 5)];
        assert_eq!(verify_flush_discipline(&good, |_| true), Ok(1));
        let bad = vec![e(EventKind::Store, 5), e(EventKind::Clflushopt, 5)];
        assert!(verify_flush_discipline(&bad, |_| true).is_err());
        let dangling = vec![e(EventKind::Store, 5)];
        assert!(verify_flush_discipline(&dangling, |_| true).is_err());
    }
}
