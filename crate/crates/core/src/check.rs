//! Bounded exhaustive exploration of the coherence protocols.
//!
//! A scenario is a few node programs plus a lock-manager program, all run
//! against one [`Shm`]. A thread step is one region operation (a load, a
//! store, a flush, a fence) or one whole index-operation body; index bodies
//! run while the program holds the index lock, so making them atomic hides
//! no interleaving another node could observe through the lock protocol.
//! Between any two steps the adversary may drain a queued flush or write
//! back a dirty line, at most `bound` times along a path.
//!
//! Search is depth first. A state is the full device and heap snapshot plus
//! every program counter and register. A state is revisited only when
//! reached with fewer adversary actions than before.
//!
//! Violations:
//! - two nodes inside the critical section at once;
//! - a load of lock-protected data returning something other than the most
//!   recent store to it (the staleness ghost);
//! - a final counter that lost an update;
//! - a reader that sees READY but reads payload bytes from before the DMA;
//! - an index operation failing.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::rc::Rc;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interlock::{LockHandle, SlotState};
use crate::memory::{DmaCompletion, FlushDiscipline, MemError, NodeId, LINE_SIZE};
use crate::objectstore::ShmRef;
use crate::prefixcache::{EntryRef, KvBlockSpec, PrefixIndex};
use crate::shm::{ConfigError, ManagerMode, Shm, ShmConfig, ShmNode, ShmSnapshot};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Two nodes each enter a lock-protected counter increment.
    Lock,
    /// Two nodes each increment a reference count under a lock, flushing the
    /// count with the chosen discipline. The lock itself always uses
    /// `clflush`.
    Refcount,
    /// One node inserts, fills and publishes an index entry while another
    /// looks it up and reads its payload.
    Publication,
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lock" => Ok(Scenario::Lock),
            "refcount" => Ok(Scenario::Refcount),
            "publication" => Ok(Scenario::Publication),
            _ => Err(format!("unknown scenario `{s}` (lock, refcount, publication)")),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Lock => "lock",
            Scenario::Refcount => "refcount",
            Scenario::Publication => "publication",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckConfig {
    pub scenario: Scenario,
    pub discipline: FlushDiscipline,
    /// Adversary actions allowed along one path.
    pub bound: usize,
    /// Critical-section entries per node.
    pub rounds: u32,
    /// Give up after this many distinct states.
    pub max_states: u64,
    /// Violation traces kept in the report.
    pub keep_traces: usize,
}

impl CheckConfig {
    pub fn new(scenario: Scenario, discipline: FlushDiscipline, bound: usize) -> Self {
        Self { scenario, discipline, bound, rounds: 2, max_states: 20_000_000, keep_traces: 3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum ViolationKind {
    MutualExclusion,
    StaleLoad,
    LostUpdate,
    PayloadBeforeReady,
    OperationFailed,
}

#[derive(Clone, Debug, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
    pub trace: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub config: CheckConfig,
    pub states: u64,
    pub transitions: u64,
    pub adversary_transitions: u64,
    pub max_depth: usize,
    /// False when the state limit stopped the search early.
    pub complete: bool,
    pub violation_count: u64,
    pub violation_kinds: Vec<(ViolationKind, u64)>,
    pub violations: Vec<Violation>,
    pub elapsed_ms: u128,
}

impl CheckReport {
    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violation_kinds.iter().any(|(k, n)| *k == kind && *n > 0)
    }
}

#[derive(Debug, Error)]
pub enum CheckError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("scenario setup failed: {0}")]
    Setup(String),
}

/// Atomic index operations a program can run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Body {
    InsertPending,
    Dma,
    Publish,
    Lookup,
    ReadPayload,
    Unpin,
}

/// Which line a data instruction touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Instr {
    SlotFlush,
    SlotStore(SlotState),
    /// Invalidate-and-load the own slot; advance only once it reads LOCKED.
    SlotPoll,
    Flush,
    FlushOpt,
    Fence,
    Load,
    StoreInc,
    Body(Body),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Thread {
    pc: u16,
    regs: [u64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum MgrPc {
    Load(u8),
    GrantFlush0,
    GrantStore,
    GrantFlush1,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Manager {
    pc: MgrPc,
    seen: [SlotState; 2],
    last: Option<u8>,
    target: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct Local {
    threads: [Thread; 2],
    mgr: Manager,
}

struct World {
    shm: Arc<Shm>,
    nodes: [ShmNode; 2],
    lock: u32,
    data: u64,
    programs: [Vec<Instr>; 2],
    in_cs: [Vec<bool>; 2],
    index: Option<PrefixIndex>,
    expected_final: Option<u64>,
}

const PAYLOAD_BYTE: u8 = 0xab;
const BLOCK_HASH: u64 = 0x5eed;

fn lock_program(body: &[Instr]) -> Vec<Instr> {
    let mut p = vec![
        Instr::SlotFlush,
        Instr::SlotStore(SlotState::Waiting),
        Instr::SlotFlush,
        Instr::SlotPoll,
    ];
    p.extend_from_slice(body);
    p.extend([Instr::SlotFlush, Instr::SlotStore(SlotState::Idle), Instr::SlotFlush]);
    p
}

fn cs_flags(p: &[Instr]) -> Vec<bool> {
    // Flag per pc, where pc i means instruction i runs next. The lock is held
    // from a successful poll until the IDLE store has run.
    let mut held = false;
    let mut out = Vec::with_capacity(p.len() + 1);
    for ins in p {
        out.push(held);
        match ins {
            Instr::SlotPoll => held = true,
            Instr::SlotStore(SlotState::Idle) => held = false,
            _ => {}
        }
    }
    out.push(held);
    out
}

fn small_config(nodes: u32) -> ShmConfig {
    ShmConfig {
        capacity: 256 << 10,
        nodes,
        lock_entries: 2,
        object_buckets: 4,
        chunk_size: 16 << 10,
        remote_ring_slots: 4,
        coherent: false,
        manager: ManagerMode::Inline,
        trace_locks: false,
    }
}

impl World {
    fn build(cfg: &CheckConfig) -> Result<Self, CheckError> {
        let shm = Shm::create(small_config(2))?;
        let setup = |e: String| CheckError::Setup(e);
        let nodes = [
            shm.join(NodeId(0)).map_err(|e| setup(e.to_string()))?,
            shm.join(NodeId(1)).map_err(|e| setup(e.to_string()))?,
        ];
        let rounds = cfg.rounds.max(1) as usize;
        let (lock, programs, index, data, expected) = match cfg.scenario {
            Scenario::Lock | Scenario::Refcount => {
                let lock = nodes[0].allocate_lock().map_err(|e| setup(e.to_string()))?;
                let data = shm.layout().reserved_chunks * shm.layout().chunk_size;
                let (pre, post) = match (cfg.scenario, cfg.discipline) {
                    (Scenario::Lock, _) | (_, FlushDiscipline::Clflush) => (vec![Instr::Flush], vec![Instr::Flush]),
                    (_, FlushDiscipline::ClflushoptFence) => {
                        (vec![Instr::FlushOpt, Instr::Fence], vec![Instr::FlushOpt, Instr::Fence])
                    }
                };
                let mut body = pre;
                body.extend([Instr::Load, Instr::StoreInc]);
                body.extend(post);
                let one = lock_program(&body);
                let rounds = if cfg.scenario == Scenario::Refcount { 1 } else { rounds };
                let prog: Vec<Instr> = (0..rounds).flat_map(|_| one.clone()).collect();
                (lock, [prog.clone(), prog], None, data, Some(2 * rounds as u64))
            }
            Scenario::Publication => {
                let spec = KvBlockSpec { tokens_per_block: 1, bytes_per_token: LINE_SIZE };
                let mut idx =
                    PrefixIndex::create(&nodes[0], "prefix_index", 4, spec).map_err(|e| setup(e.to_string()))?;
                idx.discipline = cfg.discipline;
                let lock = idx.lock();
                let mut writer = lock_program(&[Instr::Body(Body::InsertPending)]);
                writer.push(Instr::Body(Body::Dma));
                writer.extend(lock_program(&[Instr::Body(Body::Publish)]));
                let mut reader = lock_program(&[Instr::Body(Body::Lookup)]);
                reader.push(Instr::Body(Body::ReadPayload));
                reader.extend(lock_program(&[Instr::Body(Body::Unpin)]));
                (lock, [writer, reader], Some(idx), 0, None)
            }
        };
        shm.region().with_state(|s| s.enable_staleness_tracking());
        let in_cs = [cs_flags(&programs[0]), cs_flags(&programs[1])];
        Ok(Self { shm, nodes, lock: lock_id(lock), data, programs, in_cs, index, expected_final: expected })
    }

    /// Lines whose loads must never be stale: everything except lock slots
    /// and remote-ring counters, which are polled without a lock by design.
    fn watched(&self, offset: u64) -> bool {
        let l = self.shm.layout();
        let line = offset / LINE_SIZE * LINE_SIZE;
        let in_locks = line >= l.lock_table && line < l.lock_entry(l.total_locks);
        let is_slot = in_locks && !(line - l.lock_table).is_multiple_of(l.lock_entry_stride);
        let ring_counter = line >= l.rings
            && line < l.rings + l.nodes as u64 * l.ring_stride
            && (line - l.rings) % l.ring_stride < 2 * LINE_SIZE;
        !is_slot && !ring_counter && line != l.lock_generation
    }

    fn slot(&self, node: usize) -> u64 {
        self.shm.layout().lock_slot(self.lock, NodeId(node as u32))
    }

    fn initial(&self) -> Local {
        let t = Thread { pc: 0, regs: [0; 3] };
        Local {
            threads: [t.clone(), t],
            mgr: Manager { pc: MgrPc::Load(0), seen: [SlotState::Idle; 2], last: None, target: 0 },
        }
    }

    fn done(&self, l: &Local, t: usize) -> bool {
        l.threads[t].pc as usize >= self.programs[t].len()
    }

    fn step_thread(&self, l: &mut Local, t: usize) -> Result<String, (ViolationKind, String)> {
        let node = &self.nodes[t];
        let v = node.view();
        let th = &mut l.threads[t];
        let ins = self.programs[t][th.pc as usize];
        let mem = |e: MemError| (ViolationKind::OperationFailed, e.to_string());
        let label = format!("n{t}:{ins:?}");
        let mut next = th.pc + 1;
        match ins {
            Instr::SlotFlush => v.clflush(self.slot(t), 8).map_err(mem)?,
            Instr::SlotStore(s) => v.store_u64(self.slot(t), s.encode()).map_err(mem)?,
            Instr::SlotPoll => {
                if SlotState::decode(v.load_fresh_u64(self.slot(t)).map_err(mem)?) != SlotState::Locked {
                    next = th.pc;
                }
            }
            Instr::Flush => v.clflush(self.data, 8).map_err(mem)?,
            Instr::FlushOpt => v.clflushopt(self.data, 8).map_err(mem)?,
            Instr::Fence => v.fence(),
            Instr::Load => th.regs[0] = v.load_u64(self.data).map_err(mem)?,
            Instr::StoreInc => v.store_u64(self.data, th.regs[0] + 1).map_err(mem)?,
            Instr::Body(b) => {
                let idx = self.index.as_ref().expect("index scenario");
                let fail = |e: crate::prefixcache::PrefixError| (ViolationKind::OperationFailed, format!("{b:?}: {e}"));
                match b {
                    Body::InsertPending => {
                        let p = idx.insert_pending_locked(node, BLOCK_HASH, 1).map_err(fail)?;
                        th.regs = [p.entry.0 .0, p.kv_ref.0, p.kv_size];
                    }
                    Body::Dma => {
                        let bytes = vec![PAYLOAD_BYTE; th.regs[2] as usize];
                        self.shm.region().dma_write(th.regs[1], &bytes).map_err(mem)?;
                    }
                    Body::Publish => {
                        let done = DmaCompletion { offset: th.regs[1], len: th.regs[2] };
                        idx.publish_locked(node, EntryRef(ShmRef(th.regs[0])), done).map_err(fail)?;
                    }
                    Body::Lookup => {
                        let hit = idx.lookup_and_pin_locked(node, &[BLOCK_HASH]).map_err(fail)?;
                        match hit.entries.first() {
                            Some(&e) => {
                                let info = idx.entry_info(node, e).map_err(fail)?;
                                th.regs = [e.0 .0, info.kv_ref.0, info.kv_size];
                            }
                            None => th.regs = [u64::MAX, 0, 0],
                        }
                    }
                    Body::ReadPayload => {
                        if th.regs[0] != u64::MAX {
                            let got = self.shm.region().dma_read(th.regs[1], th.regs[2]).map_err(mem)?;
                            if got.iter().any(|&b| b != PAYLOAD_BYTE) {
                                return Err((
                                    ViolationKind::PayloadBeforeReady,
                                    "entry was READY but its payload held pre-DMA bytes".into(),
                                ));
                            }
                        } else {
                            // Missed: nothing to read or unpin.
                            next = self.programs[t].len() as u16;
                        }
                    }
                    Body::Unpin => {
                        idx.unpin_locked(node, &[EntryRef(ShmRef(th.regs[0]))]).map_err(fail)?;
                    }
                }
            }
        }
        th.pc = next;
        Ok(label)
    }

    fn step_manager(&self, l: &mut Local) -> Result<String, (ViolationKind, String)> {
        let v = self.nodes[0].view();
        let mem = |e: MemError| (ViolationKind::OperationFailed, e.to_string());
        let m = &mut l.mgr;
        let label = format!("mgr:{:?}", m.pc);
        m.pc = match m.pc {
            MgrPc::Load(i) => {
                m.seen[i as usize] = SlotState::decode(v.load_fresh_u64(self.slot(i as usize)).map_err(mem)?);
                if i == 0 {
                    MgrPc::Load(1)
                } else if m.seen.contains(&SlotState::Locked) {
                    MgrPc::Load(0)
                } else {
                    let start = m.last.map_or(0, |g| (g + 1) % 2);
                    match (0..2).map(|k| (start + k) % 2).find(|&k| m.seen[k as usize] == SlotState::Waiting) {
                        Some(w) => {
                            m.target = w;
                            MgrPc::GrantFlush0
                        }
                        None => MgrPc::Load(0),
                    }
                }
            }
            MgrPc::GrantFlush0 => {
                v.clflush(self.slot(m.target as usize), 8).map_err(mem)?;
                MgrPc::GrantStore
            }
            MgrPc::GrantStore => {
                v.store_u64(self.slot(m.target as usize), SlotState::Locked.encode()).map_err(mem)?;
                MgrPc::GrantFlush1
            }
            MgrPc::GrantFlush1 => {
                v.clflush(self.slot(m.target as usize), 8).map_err(mem)?;
                m.last = Some(m.target);
                MgrPc::Load(0)
            }
        };
        Ok(label)
    }

    /// Violations visible in a state (not tied to the step that reached it).
    fn state_violation(&self, l: &Local) -> Option<(ViolationKind, String)> {
        let inside = (0..2).filter(|&t| self.in_cs[t][l.threads[t].pc as usize]).count();
        if inside > 1 {
            return Some((ViolationKind::MutualExclusion, "both nodes hold the lock".into()));
        }
        if let Some(expect) = self.expected_final {
            if (0..2).all(|t| self.done(l, t)) {
                let got = self
                    .shm
                    .region()
                    .with_state(|s| s.backing_bytes(self.data, 8))
                    .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                    .unwrap_or(u64::MAX);
                // Any dirty or queued copy of the counter can still reach the
                // device later, so the device value alone decides only once
                // no cache holds the line dirty.
                let dirty = self.shm.region().with_state(|s| {
                    (0..2).any(|n| {
                        s.cache(NodeId(n)).cached_lines().any(|(line, d)| d && line == self.data / LINE_SIZE)
                    })
                });
                if !dirty && got != expect {
                    return Some((ViolationKind::LostUpdate, format!("counter is {got}, expected {expect}")));
                }
            }
        }
        None
    }
}

fn lock_id(h: LockHandle) -> u32 {
    h.id()
}

fn fingerprint(snap: &ShmSnapshot, local: &Local) -> u128 {
    let mut a = DefaultHasher::new();
    snap.hash(&mut a);
    local.hash(&mut a);
    let mut b = DefaultHasher::new();
    0x9e37_79b9_7f4a_7c15u64.hash(&mut b);
    local.hash(&mut b);
    snap.hash(&mut b);
    (a.finish() as u128) << 64 | b.finish() as u128
}

struct TraceNode {
    label: String,
    parent: Option<Rc<TraceNode>>,
}

fn trace_of(node: &Option<Rc<TraceNode>>, last: String) -> Vec<String> {
    let mut out = vec![last];
    let mut cur = node.clone();
    while let Some(n) = cur {
        out.push(n.label.clone());
        cur = n.parent.clone();
    }
    out.reverse();
    out
}

struct Frame {
    snap: ShmSnapshot,
    local: Local,
    adv: usize,
    depth: usize,
    trace: Option<Rc<TraceNode>>,
}

/// Explore every interleaving of the scenario's programs and every adversary
/// schedule of at most `cfg.bound` actions.
pub fn run_check(cfg: &CheckConfig) -> Result<CheckReport, CheckError> {
    let started = Instant::now();
    let w = World::build(cfg)?;
    let mut visited: HashMap<u128, usize> = HashMap::new();
    let mut report = CheckReport {
        config: cfg.clone(),
        states: 0,
        transitions: 0,
        adversary_transitions: 0,
        max_depth: 0,
        complete: true,
        violation_count: 0,
        violation_kinds: Vec::new(),
        violations: Vec::new(),
        elapsed_ms: 0,
    };
    let mut kinds: HashMap<ViolationKind, u64> = HashMap::new();
    let mut record = |report: &mut CheckReport, kind, detail: String, trace: Vec<String>| {
        report.violation_count += 1;
        *kinds.entry(kind).or_default() += 1;
        if report.violations.len() < cfg.keep_traces {
            report.violations.push(Violation { kind, detail, trace });
        }
    };

    let init = Frame { snap: w.shm.snapshot(), local: w.initial(), adv: 0, depth: 0, trace: None };
    visited.insert(fingerprint(&init.snap, &init.local), 0);
    let mut stack = vec![init];
    while let Some(f) = stack.pop() {
        report.states += 1;
        report.max_depth = report.max_depth.max(f.depth);
        if report.states > cfg.max_states {
            report.complete = false;
            break;
        }
        if let Some((kind, detail)) = {
            w.shm.restore(&f.snap);
            w.state_violation(&f.local)
        } {
            record(&mut report, kind, detail, trace_of(&f.trace, "end".into()));
            continue;
        }
        let mut moves: Vec<Move> = (0..2).filter(|&t| !w.done(&f.local, t)).map(Move::Thread).collect();
        if moves.is_empty() {
            continue;
        }
        moves.push(Move::Manager);
        if f.adv < cfg.bound {
            moves.extend(f.snap.region.adversary_actions().into_iter().map(Move::Adversary));
        }
        for mv in moves {
            w.shm.restore(&f.snap);
            let mut local = f.local.clone();
            let mut adv = f.adv;
            let outcome = match mv {
                Move::Thread(t) => w.step_thread(&mut local, t),
                Move::Manager => w.step_manager(&mut local),
                Move::Adversary(a) => {
                    adv += 1;
                    report.adversary_transitions += 1;
                    w.shm.region().apply(a);
                    Ok(format!("adv:{a}"))
                }
            };
            report.transitions += 1;
            let stale: Vec<_> = w
                .shm
                .region()
                .with_state(|s| s.take_stale_loads())
                .into_iter()
                .filter(|s| w.watched(s.offset))
                .collect();
            let label = match outcome {
                Err((kind, detail)) => {
                    record(&mut report, kind, detail, trace_of(&f.trace, format!("{mv:?}")));
                    continue;
                }
                Ok(label) => label,
            };
            if let Some(s) = stale.first() {
                let detail = format!("{} loaded stale bytes at {:#x}", s.node, s.offset);
                record(&mut report, ViolationKind::StaleLoad, detail, trace_of(&f.trace, label));
                continue;
            }
            let snap = w.shm.snapshot();
            let fp = fingerprint(&snap, &local);
            match visited.get(&fp) {
                Some(&seen) if seen <= adv => continue,
                _ => {
                    visited.insert(fp, adv);
                }
            }
            let trace = Some(Rc::new(TraceNode { label, parent: f.trace.clone() }));
            stack.push(Frame { snap, local, adv, depth: f.depth + 1, trace });
        }
    }
    let mut kinds: Vec<_> = kinds.into_iter().collect();
    kinds.sort_by_key(|(k, _)| *k as u8);
    report.violation_kinds = kinds;
    report.elapsed_ms = started.elapsed().as_millis();
    Ok(report)
}

#[derive(Clone, Copy, Debug)]
enum Move {
    Thread(usize),
    Manager,
    Adversary(crate::memory::AdversaryAction),
}
