//! Virtual-time event loop for disaggregated prefill/decode serving.
//!
//! Prefill workers run one request at a time: lookup, read cached blocks,
//! compute the misses (first token), write KV, free. Decode workers admit
//! requests FIFO against KV capacity, read the whole prompt, then run
//! batched iterations until every admitted request has its output.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::sync::Arc;

use cxlkv_core::memory::NodeId;
use cxlkv_core::prefixcache::{block_hashes, EntryRef, KvBlockSpec, Pending, PrefixError, PrefixIndex};
use cxlkv_core::shm::{ManagerMode, Shm, ShmConfig, ShmNode};
use serde::{Deserialize, Serialize};

use crate::metrics::{RequestMetrics, RunSummary};
use crate::timing::{Path, Phase, TimingModel};
use crate::workload::Request;
use crate::SimError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// No prefix cache; the full KV goes over the network.
    Nixl,
    /// Prefix cache in prefill host DRAM; the full KV still goes over the network.
    Lmcache,
    /// Shared pool: prefill writes only missed blocks, decode reads from the pool.
    Tract,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "nixl" => Ok(Mode::Nixl),
            "lmcache" => Ok(Mode::Lmcache),
            "tract" => Ok(Mode::Tract),
            _ => Err(format!("unknown mode {s:?} (expected nixl, lmcache or tract)")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Nixl => "nixl",
            Mode::Lmcache => "lmcache",
            Mode::Tract => "tract",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Workers {
    pub prefill: u32,
    pub decode: u32,
    /// KV bytes each GPU can hold.
    pub gpu_kv_capacity: u64,
    /// Payload bytes of each prefix cache (shared pool or per-host DRAM).
    pub cache_capacity: u64,
    pub index_buckets: u32,
    pub tokens_per_block: u32,
    /// Disable to measure transfer alone.
    pub prefix_cache: bool,
}

impl Default for Workers {
    fn default() -> Self {
        Self {
            prefill: 1,
            decode: 1,
            gpu_kv_capacity: 24 << 30,
            cache_capacity: 48 << 30,
            index_buckets: 16384,
            tokens_per_block: 64,
            prefix_cache: true,
        }
    }
}

const CHUNK: u64 = 2 << 20;
/// Extra pool space for index metadata on top of the payload capacity.
const METADATA_SLACK: u64 = 64 << 20;

type Ns = u64;

fn ns(seconds: f64) -> Ns {
    (seconds * 1e9).ceil() as Ns
}

/// One transfer at a time, in reservation order.
#[derive(Default)]
struct Link {
    free_at: Ns,
    bytes: u64,
}

impl Link {
    fn reserve(&mut self, now: Ns, dur: Ns, bytes: u64) -> Ns {
        let start = self.free_at.max(now);
        self.free_at = start + dur;
        self.bytes += bytes;
        self.free_at
    }
}

struct Cache {
    shm: Arc<Shm>,
    nodes: Vec<ShmNode>,
    index: PrefixIndex,
}

impl Cache {
    fn new(nodes: u32, w: &Workers, bytes_per_token: u64) -> Result<Self, SimError> {
        let capacity = (w.cache_capacity + METADATA_SLACK).div_ceil(CHUNK) * CHUNK;
        let shm = Shm::create(ShmConfig {
            capacity,
            nodes,
            lock_entries: 4,
            object_buckets: 16,
            chunk_size: CHUNK,
            remote_ring_slots: 4096,
            coherent: true,
            manager: ManagerMode::Inline,
            trace_locks: false,
        })
        .map_err(|e| SimError::Config(e.to_string()))?;
        let nodes = (0..nodes).map(|n| shm.join(NodeId(n))).collect::<Result<Vec<_>, _>>()?;
        let spec = KvBlockSpec { tokens_per_block: w.tokens_per_block, bytes_per_token };
        let index = PrefixIndex::create(&nodes[0], "prefix_index", w.index_buckets, spec)?;
        Ok(Self { shm, nodes, index })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Arrival(usize),
    ComputeDone(usize),
    /// Tract: missed blocks are in the pool.
    PoolWriteDone(usize),
    /// Lmcache: missed blocks are in host DRAM.
    LocalSaveDone(usize),
    /// Network delivery of the full KV to the decode GPU.
    NetworkDone(usize),
    /// Tract: decode finished reading the prompt from the pool.
    PoolReadDone(usize),
    DecodeStep(usize),
}

#[derive(Default)]
struct ReqState {
    prefill_worker: usize,
    decode_worker: usize,
    start: Ns,
    read_end: Ns,
    compute_end: Ns,
    write_end: Ns,
    decode_enqueue: Ns,
    decode_admit: Ns,
    decode_ready: Ns,
    completion: Ns,
    hashes: Vec<u64>,
    block_tokens: Vec<u32>,
    hit_blocks: usize,
    /// Pool pins held until decode completes (tract) or prefill frees (lmcache).
    pins: Vec<EntryRef>,
    pending: Vec<Pending>,
    /// Blocks written but not cached (duplicate in flight, or no room).
    transient: Vec<usize>,
    kv_write_bytes: u64,
    kv_write_hit_bytes: u64,
    save_done: bool,
    network_done: bool,
    remaining_tokens: u32,
    decode_bytes: u64,
    done: bool,
}

#[derive(Default)]
struct DecodeWorker {
    used: u64,
    running: Vec<usize>,
    joining: Vec<usize>,
    stepping: bool,
}

pub struct Simulation<'a> {
    mode: Mode,
    timing: &'a TimingModel,
    workers: &'a Workers,
    requests: &'a [Request],
    now: Ns,
    seq: u64,
    events: BinaryHeap<Reverse<(Ns, u64, Event)>>,
    st: Vec<ReqState>,
    prefill_queue: VecDeque<usize>,
    prefill_busy: Vec<Option<usize>>,
    prefill_used: Vec<u64>,
    peak_prefill: u64,
    decode_queue: VecDeque<usize>,
    decode: Vec<DecodeWorker>,
    peak_decode: u64,
    cxl: Link,
    rdma: Vec<Link>,
    host: Vec<Link>,
    /// Tract: one shared pool. Lmcache: one per prefill host.
    caches: Vec<Cache>,
    spec: KvBlockSpec,
}

impl<'a> Simulation<'a> {
    fn new(mode: Mode, timing: &'a TimingModel, workers: &'a Workers, requests: &'a [Request]) -> Result<Self, SimError> {
        timing.validate()?;
        if workers.prefill == 0 || workers.decode == 0 {
            return Err(SimError::Config("workers.prefill and workers.decode must be at least 1".into()));
        }
        if workers.tokens_per_block == 0 || workers.index_buckets == 0 {
            return Err(SimError::Config("workers.tokens_per_block and index_buckets must be positive".into()));
        }
        let spec = KvBlockSpec { tokens_per_block: workers.tokens_per_block, bytes_per_token: timing.bytes_per_token };
        let caching = workers.prefix_cache && mode != Mode::Nixl;
        if caching && spec.kv_size(workers.tokens_per_block) > workers.cache_capacity {
            return Err(SimError::Config(format!(
                "a KV block of {} bytes does not fit the {} byte cache",
                spec.kv_size(workers.tokens_per_block),
                workers.cache_capacity
            )));
        }
        let p = workers.prefill as usize;
        let caches = match (caching, mode) {
            (true, Mode::Tract) => vec![Cache::new(workers.prefill + workers.decode, workers, timing.bytes_per_token)?],
            (true, Mode::Lmcache) => {
                (0..p).map(|_| Cache::new(1, workers, timing.bytes_per_token)).collect::<Result<_, _>>()?
            }
            _ => Vec::new(),
        };
        Ok(Self {
            mode,
            timing,
            workers,
            requests,
            now: 0,
            seq: 0,
            events: BinaryHeap::new(),
            st: (0..requests.len()).map(|_| ReqState::default()).collect(),
            prefill_queue: VecDeque::new(),
            prefill_busy: vec![None; p],
            prefill_used: vec![0; p],
            peak_prefill: 0,
            decode_queue: VecDeque::new(),
            decode: (0..workers.decode).map(|_| DecodeWorker::default()).collect(),
            peak_decode: 0,
            cxl: Link::default(),
            rdma: (0..p).map(|_| Link::default()).collect(),
            host: (0..p).map(|_| Link::default()).collect(),
            caches,
            spec,
        })
    }

    fn at(&mut self, t: Ns, e: Event) {
        self.seq += 1;
        self.events.push(Reverse((t, self.seq, e)));
    }

    fn caching(&self) -> bool {
        !self.caches.is_empty()
    }

    fn block_bytes(&self, r: usize, blocks: impl Iterator<Item = usize>) -> Vec<u64> {
        blocks.map(|b| self.spec.kv_size(self.st[r].block_tokens[b])).collect()
    }

    fn run(mut self) -> Result<RunSummary, SimError> {
        for (i, req) in self.requests.iter().enumerate() {
            if req.tokens.is_empty() || req.output_len == 0 {
                return Err(SimError::Config(format!("request {} has an empty prompt or output", req.id)));
            }
            self.at(req.arrival_ns, Event::Arrival(i));
        }
        while let Some(Reverse((t, _, e))) = self.events.pop() {
            self.now = t;
            match e {
                Event::Arrival(r) => {
                    self.prefill_queue.push_back(r);
                    self.start_prefills()?;
                }
                Event::ComputeDone(r) => self.compute_done(r)?,
                Event::PoolWriteDone(r) => self.pool_write_done(r)?,
                Event::LocalSaveDone(r) => {
                    let w = self.st[r].prefill_worker;
                    let idx = self.caches[w].index.clone();
                    for p in std::mem::take(&mut self.st[r].pending) {
                        let done = self.caches[w].shm.region().dma_write_modeled(p.kv_ref.0, p.kv_size)?;
                        idx.publish(&self.caches[w].nodes[0], p.entry, done)?;
                    }
                    self.st[r].save_done = true;
                    self.maybe_free_prefill(r)?;
                }
                Event::NetworkDone(r) => {
                    self.st[r].network_done = true;
                    self.decode_ready(r);
                    self.maybe_free_prefill(r)?;
                }
                Event::PoolReadDone(r) => self.decode_ready(r),
                Event::DecodeStep(d) => self.decode_step(d)?,
            }
        }
        if let Some(r) = self.st.iter().position(|s| !s.done) {
            return Err(SimError::Stalled(self.requests[r].id));
        }
        Ok(self.summary())
    }

    // Enqueue, look up and pin the prefix, schedule, read hits, then compute misses.
    fn start_prefills(&mut self) -> Result<(), SimError> {
        while let Some(w) = self.prefill_busy.iter().position(Option::is_none) {
            let Some(&r) = self.prefill_queue.front() else { break };
            let prompt = self.requests[r].tokens.len() as u64 * self.timing.bytes_per_token;
            if prompt > self.workers.gpu_kv_capacity {
                return Err(SimError::Capacity { request: self.requests[r].id, bytes: prompt });
            }
            self.prefill_queue.pop_front();
            self.prefill_busy[w] = Some(r);
            self.prefill_used[w] += prompt;
            self.peak_prefill = self.peak_prefill.max(self.prefill_used[w]);

            let tokens = &self.requests[r].tokens;
            let tpb = self.workers.tokens_per_block as usize;
            let s = &mut self.st[r];
            s.prefill_worker = w;
            s.start = self.now;
            s.hashes = block_hashes(tokens, tpb);
            s.block_tokens = tokens.chunks(tpb).map(|c| c.len() as u32).collect();

            let (hit, pins) = match self.mode {
                _ if !self.caching() => (0, Vec::new()),
                Mode::Tract => {
                    let c = &self.caches[0];
                    let l = c.index.lookup_and_pin(&c.nodes[w], &self.st[r].hashes)?;
                    (l.hit_len, l.entries)
                }
                Mode::Lmcache => {
                    let c = &self.caches[w];
                    let l = c.index.lookup_and_pin(&c.nodes[0], &self.st[r].hashes)?;
                    (l.hit_len, l.entries)
                }
                Mode::Nixl => unreachable!("nixl never caches"),
            };
            self.st[r].hit_blocks = hit;
            self.st[r].pins = pins;

            let sizes = self.block_bytes(r, 0..hit);
            let total: u64 = sizes.iter().sum();
            let read_end = match self.mode {
                _ if hit == 0 => self.now,
                Mode::Tract => self.cxl.reserve(self.now, ns(self.timing.blocks_time(Path::Cxl, &sizes)), total),
                _ => self.host[w].reserve(self.now, ns(self.timing.blocks_time(Path::Host, &sizes)), total),
            };
            let hit_tokens: u64 = self.st[r].block_tokens[..hit].iter().map(|&t| t as u64).sum();
            let missed = self.requests[r].tokens.len() as u64 - hit_tokens;
            let compute_end = read_end + ns(self.timing.compute_time(Phase::Prefill, missed));
            self.st[r].read_end = read_end;
            self.st[r].compute_end = compute_end;
            self.at(compute_end, Event::ComputeDone(r));
        }
        Ok(())
    }

    // First token is out; write the missed KV.
    fn compute_done(&mut self, r: usize) -> Result<(), SimError> {
        let w = self.st[r].prefill_worker;
        let n = self.st[r].hashes.len();
        let hit = self.st[r].hit_blocks;
        match self.mode {
            Mode::Tract => {
                let mut written = Vec::new();
                for b in hit..n {
                    if self.caching() {
                        let (hash, tokens) = (self.st[r].hashes[b], self.st[r].block_tokens[b]);
                        let c = &self.caches[0];
                        match c.index.insert_pending(&c.nodes[w], hash, tokens) {
                            Ok(p) => self.st[r].pending.push(p),
                            Err(PrefixError::Duplicate(_) | PrefixError::IndexFull) => self.st[r].transient.push(b),
                            Err(PrefixError::Alloc(cxlkv_core::allocator::AllocError::OutOfMemory(_))) => {
                                self.st[r].transient.push(b)
                            }
                            Err(e) => return Err(e.into()),
                        }
                    } else {
                        self.st[r].transient.push(b);
                    }
                    written.push(b);
                }
                self.account_write(r, &written);
                let sizes = self.block_bytes(r, written.iter().copied());
                let total = sizes.iter().sum();
                let end = self.cxl.reserve(self.now, ns(self.timing.blocks_time(Path::Cxl, &sizes)), total);
                self.at(end, Event::PoolWriteDone(r));
            }
            Mode::Lmcache | Mode::Nixl => {
                if self.caching() {
                    let mut saved = Vec::new();
                    for b in hit..n {
                        let (hash, tokens) = (self.st[r].hashes[b], self.st[r].block_tokens[b]);
                        let c = &self.caches[w];
                        match c.index.insert_pending(&c.nodes[0], hash, tokens) {
                            Ok(p) => {
                                self.st[r].pending.push(p);
                                saved.push(b);
                            }
                            Err(PrefixError::Duplicate(_) | PrefixError::IndexFull) => {}
                            Err(PrefixError::Alloc(cxlkv_core::allocator::AllocError::OutOfMemory(_))) => {}
                            Err(e) => return Err(e.into()),
                        }
                    }
                    let sizes = self.block_bytes(r, saved.iter().copied());
                    let total = sizes.iter().sum();
                    let end = self.host[w].reserve(self.now, ns(self.timing.blocks_time(Path::Host, &sizes)), total);
                    self.at(end, Event::LocalSaveDone(r));
                } else {
                    self.st[r].save_done = true;
                }
                // Every block crosses the network, hits included.
                let all: Vec<usize> = (0..n).collect();
                self.account_write(r, &all);
                self.enqueue_decode(r)?;
            }
        }
        Ok(())
    }

    fn account_write(&mut self, r: usize, blocks: &[usize]) {
        let hit = self.st[r].hit_blocks;
        for &b in blocks {
            let bytes = self.spec.kv_size(self.st[r].block_tokens[b]);
            self.st[r].kv_write_bytes += bytes;
            if b < hit {
                self.st[r].kv_write_hit_bytes += bytes;
            }
        }
    }

    fn pool_write_done(&mut self, r: usize) -> Result<(), SimError> {
        let w = self.st[r].prefill_worker;
        if self.caching() {
            let c = &self.caches[0];
            let node = &c.nodes[w];
            let pending = std::mem::take(&mut self.st[r].pending);
            for p in &pending {
                let done = c.shm.region().dma_write_modeled(p.kv_ref.0, p.kv_size)?;
                c.index.publish(node, p.entry, done)?;
            }
            // Hold the new blocks for the decode read as well.
            for p in &pending {
                let hash = c.index.entry_info(node, p.entry)?.hash;
                let l = c.index.lookup_and_pin(node, &[hash])?;
                debug_assert_eq!(l.hit_len, 1);
                self.st[r].pins.extend(l.entries);
            }
        }
        self.st[r].write_end = self.now;
        self.free_prefill(r)?;
        self.enqueue_decode(r)
    }

    fn maybe_free_prefill(&mut self, r: usize) -> Result<(), SimError> {
        if self.st[r].save_done && self.st[r].network_done {
            self.st[r].write_end = self.now;
            if self.mode == Mode::Lmcache && self.caching() {
                let w = self.st[r].prefill_worker;
                let pins = std::mem::take(&mut self.st[r].pins);
                self.caches[w].index.unpin(&self.caches[w].nodes[0], &pins)?;
            }
            self.free_prefill(r)?;
        }
        Ok(())
    }

    // Prefill slot is released.
    fn free_prefill(&mut self, r: usize) -> Result<(), SimError> {
        let w = self.st[r].prefill_worker;
        self.prefill_busy[w] = None;
        self.prefill_used[w] -= self.requests[r].tokens.len() as u64 * self.timing.bytes_per_token;
        self.start_prefills()
    }

    // Decode enqueue, admission, then the prompt KV read.
    fn enqueue_decode(&mut self, r: usize) -> Result<(), SimError> {
        self.st[r].decode_enqueue = self.now;
        self.decode_queue.push_back(r);
        self.admit_decodes()
    }

    fn admit_decodes(&mut self) -> Result<(), SimError> {
        while let Some(&r) = self.decode_queue.front() {
            let req = &self.requests[r];
            let need = (req.tokens.len() as u64 + req.output_len as u64) * self.timing.bytes_per_token;
            if need > self.workers.gpu_kv_capacity {
                return Err(SimError::Capacity { request: req.id, bytes: need });
            }
            // Most free capacity first; ties go to the lowest index.
            let cap = self.workers.gpu_kv_capacity;
            let Some(d) = (0..self.decode.len())
                .filter(|&d| cap - self.decode[d].used >= need)
                .max_by_key(|&d| (cap - self.decode[d].used, Reverse(d)))
            else {
                break;
            };
            self.decode_queue.pop_front();
            self.decode[d].used += need;
            self.peak_decode = self.peak_decode.max(self.decode[d].used);
            let s = &mut self.st[r];
            s.decode_worker = d;
            s.decode_admit = self.now;
            s.decode_bytes = need;
            s.remaining_tokens = req.output_len - 1;
            let n = s.hashes.len();
            let sizes = self.block_bytes(r, 0..n);
            let total = sizes.iter().sum();
            match self.mode {
                Mode::Tract => {
                    let end = self.cxl.reserve(self.now, ns(self.timing.blocks_time(Path::Cxl, &sizes)), total);
                    self.at(end, Event::PoolReadDone(r));
                }
                _ => {
                    let w = self.st[r].prefill_worker;
                    let end = self.rdma[w].reserve(self.now, ns(self.timing.blocks_time(Path::Rdma, &sizes)), total);
                    self.at(end, Event::NetworkDone(r));
                }
            }
        }
        Ok(())
    }

    // Decode cannot start before the read completes; the rest proceeds.
    fn decode_ready(&mut self, r: usize) {
        self.st[r].decode_ready = self.now;
        let d = self.st[r].decode_worker;
        self.decode[d].joining.push(r);
        if !self.decode[d].stepping {
            self.decode[d].stepping = true;
            self.at(self.now, Event::DecodeStep(d));
        }
    }

    // One decode iteration, after which finished requests free KV and unpin.
    fn decode_step(&mut self, d: usize) -> Result<(), SimError> {
        let dw = &mut self.decode[d];
        let mut finished = Vec::new();
        // Requests that were running during the last iteration gain a token.
        dw.running.retain(|&r| {
            let s = &mut self.st[r];
            s.remaining_tokens -= 1;
            if s.remaining_tokens == 0 {
                finished.push(r);
                false
            } else {
                true
            }
        });
        for r in std::mem::take(&mut dw.joining) {
            if self.st[r].remaining_tokens == 0 {
                finished.push(r);
            } else {
                dw.running.push(r);
            }
        }
        if dw.running.is_empty() {
            dw.stepping = false;
        } else {
            let t = self.now + ns(self.timing.compute_time(Phase::Decode, 1));
            self.at(t, Event::DecodeStep(d));
        }
        for r in finished {
            self.finish(r)?;
        }
        self.admit_decodes()
    }

    fn finish(&mut self, r: usize) -> Result<(), SimError> {
        let d = self.st[r].decode_worker;
        self.st[r].completion = self.now;
        self.st[r].done = true;
        self.decode[d].used -= self.st[r].decode_bytes;
        if self.mode == Mode::Tract && self.caching() {
            let pins = std::mem::take(&mut self.st[r].pins);
            let c = &self.caches[0];
            c.index.unpin(&c.nodes[self.workers.prefill as usize + d], &pins)?;
        }
        Ok(())
    }

    fn summary(&self) -> RunSummary {
        let sec = |t: Ns| t as f64 * 1e-9;
        let rows = self
            .requests
            .iter()
            .zip(&self.st)
            .map(|(req, s)| RequestMetrics {
                id: req.id,
                arrival: sec(req.arrival_ns),
                schedule_wait: sec(s.start - req.arrival_ns),
                kv_read: sec(s.read_end - s.start),
                compute: sec(s.compute_end - s.read_end),
                kv_write: sec(s.write_end - s.compute_end),
                ttft: sec(s.compute_end - req.arrival_ns),
                completion: sec(s.completion),
                input_tokens: req.tokens.len() as u32,
                output_tokens: req.output_len,
                hit_blocks: s.hit_blocks as u32,
                miss_blocks: (s.hashes.len() - s.hit_blocks) as u32,
                decode_wait: sec(s.decode_admit - s.decode_enqueue),
                decode_read: sec(s.decode_ready - s.decode_admit),
                kv_write_bytes: s.kv_write_bytes,
                kv_write_hit_bytes: s.kv_write_hit_bytes,
                prefill_worker: s.prefill_worker as u32,
                decode_worker: s.decode_worker as u32,
            })
            .collect();
        RunSummary::from_rows(
            self.mode,
            rows,
            crate::metrics::Totals {
                cxl_bytes: self.cxl.bytes,
                rdma_bytes: self.rdma.iter().map(|l| l.bytes).sum(),
                host_bytes: self.host.iter().map(|l| l.bytes).sum(),
                peak_prefill_kv: self.peak_prefill,
                peak_decode_kv: self.peak_decode,
                gpu_kv_capacity: self.workers.gpu_kv_capacity,
            },
        )
    }
}

/// Run `requests` through the serving pipeline in `mode`. Deterministic.
pub fn run_simulation(
    requests: &[Request],
    mode: Mode,
    timing: &TimingModel,
    workers: &Workers,
) -> Result<RunSummary, SimError> {
    Simulation::new(mode, timing, workers, requests)?.run()
}
