//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::{Duration, Instant};

use cxlkv_core::allocator::{usable_size, AllocError};
use cxlkv_core::check::{run_check, CheckConfig, Scenario, ViolationKind};
use cxlkv_core::interlock::stress_counter;
use cxlkv_core::memory::{FlushDiscipline, NodeId};
use cxlkv_core::prefixcache::{block_hashes, EntryRef, KvBlockSpec, PrefixError, PrefixIndex};
use cxlkv_core::shm::{Shm, ShmConfig};
use cxlkv_sim::{generate_workload, run_simulation, Aggregates, Mode, Preset, TimingModel, WorkloadSpec, Workers};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(started: Instant, limit: Duration) -> Result<(), String> {
    let t = started.elapsed();
    ensure(t < limit, || format!("took {t:.1?}, limit {limit:?}"))
}

fn c1_mutual_exclusion() -> Verdict {
    let t0 = Instant::now();
    for seed in 0..20 {
        let r = stress_counter(4, 8, 1000, seed, true).map_err(|e| format!("seed {seed}: {e}"))?;
        ensure(r.observed == 32_000, || format!("seed {seed}: counter {} != 32000", r.observed))?;
        ensure(r.flush_discipline_checked.is_some(), || format!("seed {seed}: flush trace unchecked"))?;
    }
    within(t0, Duration::from_secs(60))?;
    Ok(format!("20 seeds x 32000 increments exact, {:.1?}", t0.elapsed()))
}

fn c2_lock_model_check() -> Verdict {
    let t0 = Instant::now();
    let r = run_check(&CheckConfig::new(Scenario::Lock, FlushDiscipline::Clflush, 10)).map_err(|e| e.to_string())?;
    ensure(r.complete, || "search incomplete".into())?;
    ensure(!r.has(ViolationKind::MutualExclusion) && !r.has(ViolationKind::StaleLoad), || {
        format!("violations: {:?}", r.violation_kinds)
    })?;
    ensure(r.violation_count == 0, || format!("{} violations", r.violation_count))?;
    ensure(r.adversary_transitions > 0, || "adversary never acted".into())?;
    within(t0, Duration::from_secs(60))?;
    Ok(format!("{} states, 0 violations, {:.1?}", r.states, t0.elapsed()))
}

fn c3_refcount_counterexample() -> Verdict {
    let opt = run_check(&CheckConfig::new(Scenario::Refcount, FlushDiscipline::ClflushoptFence, 10))
        .map_err(|e| e.to_string())?;
    let sync = run_check(&CheckConfig::new(Scenario::Refcount, FlushDiscipline::Clflush, 10)).map_err(|e| e.to_string())?;
    ensure(opt.complete && sync.complete, || "search incomplete".into())?;
    ensure(opt.has(ViolationKind::StaleLoad), || "clflushopt+fence: no stale read found".into())?;
    ensure(sync.violation_count == 0, || format!("clflush: {} violations", sync.violation_count))?;
    Ok(format!("clflushopt+fence: {} stale-read schedules; clflush: 0", opt.violation_count))
}

fn c4_publication() -> Verdict {
    let t0 = Instant::now();
    let r = run_check(&CheckConfig::new(Scenario::Publication, FlushDiscipline::Clflush, 10))
        .map_err(|e| e.to_string())?;
    ensure(r.complete, || "search incomplete".into())?;
    ensure(!r.has(ViolationKind::PayloadBeforeReady), || "READY observed before payload".into())?;
    ensure(r.violation_count == 0, || format!("violations: {:?}", r.violation_kinds))?;
    within(t0, Duration::from_secs(120))?;
    Ok(format!("{} states, 0 violations, {:.1?}", r.states, t0.elapsed()))
}

/// Pool bytes an allocation holds, header included, from the size rule:
/// power-of-two blocks of at least 128 B carry a 64 B header and serve
/// requests with `size + 64 <= chunk / 2`; larger requests take whole chunks.
fn oracle_footprint(size: u64, chunk: u64) -> (u64, u64) {
    if size + 64 <= chunk / 2 {
        let block = (size + 64).next_power_of_two().max(128);
        (block, block - 64)
    } else {
        let bytes = size.div_ceil(chunk) * chunk;
        (bytes, bytes)
    }
}

fn c5_allocator() -> Verdict {
    let t0 = Instant::now();
    let chunk = 64 << 10;
    let shm = Shm::create(ShmConfig {
        capacity: 8 << 20,
        nodes: 2,
        lock_entries: 2,
        object_buckets: 16,
        chunk_size: chunk,
        remote_ring_slots: 32,
        ..ShmConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let nodes = [shm.join(NodeId(0)).unwrap(), shm.join(NodeId(1)).unwrap()];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // offset -> (end of usable range, footprint)
    let mut live: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    let (mut allocs, mut frees, mut remote, mut oom) = (0, 0, 0, 0);
    for op in 0..10_000 {
        let n = rng.gen_range(0..2);
        if live.is_empty() || rng.gen_bool(0.55) {
            let size = match rng.gen_range(0..10) {
                0 => rng.gen_range(chunk / 2 - 64..3 * chunk),
                1..=3 => rng.gen_range(1..200),
                _ => rng.gen_range(1..8000),
            };
            match nodes[n].shmalloc(size) {
                Ok(off) => {
                    allocs += 1;
                    let (foot, usable) = oracle_footprint(size, chunk);
                    ensure(usable_size(size, chunk) == usable, || format!("op {op}: usable size of {size}"))?;
                    let end = off + usable;
                    let clash = live.range(..end).next_back().is_some_and(|(_, &(e, _))| e > off);
                    ensure(!clash, || format!("op {op}: [{off:#x}, {end:#x}) overlaps a live range"))?;
                    live.insert(off, (end, foot));
                }
                Err(AllocError::OutOfMemory(_)) => oom += 1,
                Err(e) => return Err(format!("op {op}: alloc {size}: {e}")),
            }
        } else {
            let k = rng.gen_range(0..live.len());
            let off = *live.keys().nth(k).unwrap();
            match nodes[n].shfree(off) {
                Ok(()) => {
                    live.remove(&off);
                    frees += 1;
                }
                Err(AllocError::RemoteQueueFull(_)) => remote += 1,
                Err(e) => return Err(format!("op {op}: free {off:#x}: {e}")),
            }
        }
        let o = shm.occupancy().map_err(|e| e.to_string())?;
        let held: u64 = live.values().map(|&(_, f)| f).sum();
        let total = held + o.heap_free_bytes + o.remote_pending_bytes + o.free_chunk_bytes + o.metadata_bytes;
        ensure(total == o.capacity, || format!("op {op}: accounted {total} of {} bytes", o.capacity))?;
    }
    within(t0, Duration::from_secs(30))?;
    Ok(format!(
        "10000 ops ({allocs} allocs, {frees} frees, {oom} oom, {remote} queue-full), no overlap, bytes conserved, {:.1?}",
        t0.elapsed()
    ))
}

fn c6_hash_chaining() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..1000 {
        let tpb = [16usize, 64][trial % 2];
        let len = rng.gen_range(1..=12 * tpb);
        let a: Vec<u32> = (0..len).map(|_| rng.gen()).collect();
        let mut b = a.clone();
        let d = rng.gen_range(0..len);
        b[d] = a[d].wrapping_add(rng.gen_range(1..u32::MAX));
        let (ha, hb) = (block_hashes(&a, tpb), block_hashes(&b, tpb));
        ensure(ha.len() == len.div_ceil(tpb) && hb.len() == ha.len(), || format!("trial {trial}: block count"))?;
        for i in 0..ha.len() {
            let before = (i + 1) * tpb <= d;
            ensure((ha[i] == hb[i]) == before, || {
                format!("trial {trial}: block {i} of {} (tpb {tpb}, divergence at {d})", ha.len())
            })?;
        }
    }
    Ok("1000 pairs: equal before divergence, different from it on".into())
}

/// Reference LRU: READY hashes, oldest first, plus pin counts.
struct LruOracle {
    order: Vec<u64>,
    pins: HashMap<u64, u32>,
}

impl LruOracle {
    fn touch(&mut self, h: u64) {
        self.order.retain(|&x| x != h);
        self.order.push(h);
        *self.pins.entry(h).or_default() += 1;
    }

    fn unpinned_oldest_first(&self) -> Vec<u64> {
        self.order.iter().copied().filter(|h| self.pins.get(h).copied().unwrap_or(0) == 0).collect()
    }

    fn remove(&mut self, h: u64) {
        self.order.retain(|&x| x != h);
        self.pins.remove(&h);
    }
}

fn c7_lru() -> Verdict {
    let chunk = 64 << 10;
    let shm = Shm::create(ShmConfig {
        capacity: 2 << 20,
        nodes: 2,
        lock_entries: 4,
        object_buckets: 16,
        chunk_size: chunk,
        remote_ring_slots: 64,
        ..ShmConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let nodes = [shm.join(NodeId(0)).unwrap(), shm.join(NodeId(1)).unwrap()];
    // One block payload is exactly one chunk.
    let spec = KvBlockSpec { tokens_per_block: 16, bytes_per_token: 4096 };
    let idx = PrefixIndex::create(&nodes[0], "lru", 128, spec).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut oracle = LruOracle { order: Vec::new(), pins: HashMap::new() };
    let mut held: Vec<(u64, EntryRef, usize)> = Vec::new();
    let mut entries: HashMap<u64, EntryRef> = HashMap::new();
    let (mut evictions, mut explicit) = (0usize, 0usize);
    let present = |h: u64| idx.find_entry(&nodes[0], h).map(|e| e.is_some()).map_err(|e| e.to_string());
    for op in 0..5000 {
        let n = rng.gen_range(0..2);
        let node = &nodes[n];
        let roll = rng.gen_range(0..100);
        if roll < 35 {
            let h: u64 = rng.gen();
            let before = oracle.unpinned_oldest_first();
            let res = idx.insert_pending(node, h, 16);
            // Victims must be exactly the oldest unpinned entries, in order.
            let mut gone = Vec::new();
            for &v in &oracle.order {
                if !present(v)? {
                    gone.push(v);
                }
            }
            ensure(before.starts_with(&gone), || format!("op {op}: evicted {gone:x?}, oracle order {before:x?}"))?;
            for v in &gone {
                oracle.remove(*v);
                entries.remove(v);
            }
            evictions += gone.len();
            match res {
                Ok(p) => {
                    let done = shm.region().dma_write_modeled(p.kv_ref.0, p.kv_size).map_err(|e| e.to_string())?;
                    idx.publish(node, p.entry, done).map_err(|e| e.to_string())?;
                    oracle.order.push(h);
                    entries.insert(h, p.entry);
                }
                Err(PrefixError::Alloc(AllocError::OutOfMemory(_))) => {
                    ensure(gone == before, || format!("op {op}: out of memory with unpinned entries left"))?;
                }
                Err(e) => return Err(format!("op {op}: insert: {e}")),
            }
        } else if roll < 65 && held.len() < 8 {
            let h = if oracle.order.is_empty() || rng.gen_bool(0.1) {
                rng.gen()
            } else {
                oracle.order[rng.gen_range(0..oracle.order.len())]
            };
            let l = idx.lookup_and_pin(node, &[h]).map_err(|e| e.to_string())?;
            let expect = oracle.order.contains(&h);
            ensure((l.hit_len == 1) == expect, || format!("op {op}: lookup hit {} expected {expect}", l.hit_len))?;
            if expect {
                oracle.touch(h);
                held.push((h, l.entries[0], n));
            }
        } else if roll < 90 {
            if !held.is_empty() {
                let (h, e, _) = held.swap_remove(rng.gen_range(0..held.len()));
                idx.unpin(node, &[e]).map_err(|e| e.to_string())?;
                *oracle.pins.get_mut(&h).unwrap() -= 1;
            }
        } else {
            let predicted = oracle.unpinned_oldest_first().first().copied();
            let got = idx.evict_one(node).map_err(|e| e.to_string())?;
            ensure(got == predicted, || format!("op {op}: evicted {got:x?}, oracle {predicted:x?}"))?;
            if let Some(v) = got {
                oracle.remove(v);
                entries.remove(&v);
                explicit += 1;
            }
        }
        // Full order check and pin safety after every access.
        let order: Vec<u64> = idx
            .lru_order(&nodes[1])
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|e| idx.entry_info(&nodes[1], e).map(|i| i.hash))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        ensure(order == oracle.order, || format!("op {op}: LRU order diverged"))?;
        for (h, e, _) in &held {
            let info = idx.entry_info(&nodes[0], *e).map_err(|e| e.to_string())?;
            ensure(info.hash == *h && info.ref_count >= 1, || format!("op {op}: pinned entry {h:#x} lost"))?;
        }
    }
    ensure(evictions > 100 && explicit > 50, || format!("trace too tame: {evictions} + {explicit} evictions"))?;
    Ok(format!("5000 accesses, {evictions} insert evictions and {explicit} explicit evictions all predicted"))
}

fn c8_offset_portability() -> Verdict {
    let shm = Shm::create(ShmConfig { capacity: 8 << 20, nodes: 2, chunk_size: 64 << 10, ..ShmConfig::default() })
        .map_err(|e| e.to_string())?;
    let (a, b) = (shm.join(NodeId(0)).unwrap(), shm.join(NodeId(1)).unwrap());
    ensure(a.view().base() != b.view().base(), || "views share a base".into())?;
    let spec = KvBlockSpec { tokens_per_block: 16, bytes_per_token: 256 };
    let ia = PrefixIndex::create(&a, "portable", 64, spec).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut chains = Vec::new();
    for _ in 0..12 {
        let tokens: Vec<u32> = (0..rng.gen_range(1..100)).map(|_| rng.gen()).collect();
        let hashes = block_hashes(&tokens, 16);
        for (i, h) in hashes.iter().enumerate() {
            let p = ia.insert_pending(&a, *h, (tokens.len() - i * 16).min(16) as u32).map_err(|e| e.to_string())?;
            let done = shm.region().dma_write_modeled(p.kv_ref.0, p.kv_size).map_err(|e| e.to_string())?;
            ia.publish(&a, p.entry, done).map_err(|e| e.to_string())?;
        }
        chains.push(hashes);
    }
    let ib = PrefixIndex::open(&b, "portable").map_err(|e| e.to_string())?;
    let da = serde_json::to_string(&ia.dump(&a).map_err(|e| e.to_string())?).unwrap();
    let db = serde_json::to_string(&ib.dump(&b).map_err(|e| e.to_string())?).unwrap();
    ensure(da == db, || "dumps differ between views".into())?;
    for c in &chains {
        let (la, lb) = (ia.lookup_and_pin(&a, c), ib.lookup_and_pin(&b, c));
        let (la, lb) = (la.map_err(|e| e.to_string())?, lb.map_err(|e| e.to_string())?);
        ensure(la == lb && la.hit_len == c.len(), || "lookups differ between views".into())?;
    }
    // No stored word may fall inside either node's mapping.
    let cap = shm.layout().capacity;
    let bases = [a.view().base(), b.view().base()];
    let bytes = shm.region().with_state(|s| s.backing_bytes(0, cap)).map_err(|e| e.to_string())?;
    let mut scanned = 0u64;
    for (i, w) in bytes.chunks_exact(8).enumerate() {
        let w = u64::from_le_bytes(w.try_into().unwrap());
        scanned += (w != 0) as u64;
        for base in bases {
            ensure(!(base..base + cap).contains(&w), || format!("raw address {w:#x} stored at {:#x}", i * 8))?;
        }
    }
    Ok(format!("identical dumps and lookups from two bases; {scanned} non-zero words hold no address"))
}

fn static_run(len: u32, mode: Mode) -> Result<Aggregates, String> {
    let reqs = generate_workload(&WorkloadSpec::fixed(len, 200, 2.0, 9)).map_err(|e| e.to_string())?;
    let w = Workers { prefix_cache: false, ..Workers::default() };
    run_simulation(&reqs, mode, &TimingModel::default(), &w).map(|s| s.aggregates).map_err(|e| e.to_string())
}

fn c9_transfer_ttft() -> Verdict {
    let mut speedup = Vec::new();
    for len in [1500, 3000, 4500, 6000] {
        let (t, n) = (static_run(len, Mode::Tract)?, static_run(len, Mode::Nixl)?);
        ensure(t.hit_blocks == 0, || "transfer-only run produced cache hits".into())?;
        ensure(t.avg_ttft <= n.avg_ttft, || format!("{len}: tract {:.4} > nixl {:.4}", t.avg_ttft, n.avg_ttft))?;
        speedup.push((len, n.avg_ttft / t.avg_ttft));
    }
    let (first, last) = (speedup[0].1, speedup[3].1);
    ensure(last > first, || format!("nixl/tract TTFT at 6000 ({last:.3}) not above 1500 ({first:.3})"))?;
    let shown: Vec<String> = speedup.iter().map(|(l, s)| format!("{l}:{s:.2}x")).collect();
    Ok(format!("nixl/tract mean TTFT {}", shown.join(" ")))
}

fn c10_caching() -> Verdict {
    let t0 = Instant::now();
    let qps = 8.0;
    let reqs = generate_workload(&WorkloadSpec::synthetic(Preset::A, 300, qps, 10)).map_err(|e| e.to_string())?;
    let run = |m: Mode| run_simulation(&reqs, m, &TimingModel::default(), &Workers::default()).map_err(|e| e.to_string());
    let (t, l, n) = (run(Mode::Tract)?, run(Mode::Lmcache)?, run(Mode::Nixl)?);
    let (ta, la, na) = (&t.aggregates, &l.aggregates, &n.aggregates);
    ensure(na.throughput < 0.9 * qps, || format!("nixl not saturated: {:.2}/s at {qps}", na.throughput))?;
    ensure(ta.throughput > la.throughput && la.throughput > na.throughput, || {
        format!("throughput {:.3} / {:.3} / {:.3}", ta.throughput, la.throughput, na.throughput)
    })?;
    ensure(ta.avg_ttft < la.avg_ttft && la.avg_ttft < na.avg_ttft, || {
        format!("avg TTFT {:.3} / {:.3} / {:.3}", ta.avg_ttft, la.avg_ttft, na.avg_ttft)
    })?;
    ensure(ta.p99_ttft < la.p99_ttft && la.p99_ttft < na.p99_ttft, || {
        format!("p99 TTFT {:.3} / {:.3} / {:.3}", ta.p99_ttft, la.p99_ttft, na.p99_ttft)
    })?;
    ensure(ta.hit_blocks > 0, || "no cache hits".into())?;
    ensure(t.requests.iter().all(|r| r.kv_write_hit_bytes == 0), || "tract wrote hit blocks".into())?;
    let mut rates = Vec::new();
    for p in [Preset::A, Preset::B, Preset::C] {
        let reqs = generate_workload(&WorkloadSpec::synthetic(p, 300, qps, 10)).map_err(|e| e.to_string())?;
        let s = run_simulation(&reqs, Mode::Tract, &TimingModel::default(), &Workers::default())
            .map_err(|e| e.to_string())?;
        rates.push(s.aggregates.hit_rate);
    }
    ensure(rates[0] > rates[1] && rates[1] > rates[2], || format!("hit rates A/B/C {rates:.3?}"))?;
    within(t0, Duration::from_secs(300))?;
    Ok(format!(
        "throughput {:.2}>{:.2}>{:.2}/s, avg TTFT {:.2}<{:.2}<{:.2}s, p99 {:.2}<{:.2}<{:.2}s, hit-block writes 0, hit rate A/B/C {:.3}>{:.3}>{:.3}",
        ta.throughput, la.throughput, na.throughput, ta.avg_ttft, la.avg_ttft, na.avg_ttft, ta.p99_ttft, la.p99_ttft,
        na.p99_ttft, rates[0], rates[1], rates[2]
    ))
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn c11_determinism() -> Verdict {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let invocations: Vec<Vec<&str>> = vec![
        vec!["bench", "--mode", "tract", "--seed", "3", "--qps", "6", "--emit-cdf"],
        vec!["bench", "--mode", "lmcache", "--seed", "3", "--qps", "6", "--emit-cdf"],
        vec!["bench", "--mode", "nixl", "--seed", "3", "--qps", "6", "--emit-cdf"],
        vec!["locktest", "--nodes", "2", "--threads", "2", "--iters", "200", "--seed", "3"],
        vec!["alloctest", "--nodes", "2", "--iters", "2000", "--seed", "3"],
        vec!["cohtest", "--discipline", "clflushopt"],
        vec!["modelcheck", "--scenario", "publication", "--bound", "4"],
        vec!["dump", "--seed", "3"],
    ];
    let mut compared = 0;
    for (i, args) in invocations.iter().enumerate() {
        let mut outs = Vec::new();
        for rep in 0..2 {
            let out = tmp.path().join(format!("{i}-{rep}"));
            let mut argv = vec!["cxlkv"];
            argv.extend(args);
            argv.extend(["--out", out.to_str().unwrap()]);
            let code = cxlkv_cli::dispatch(&argv);
            ensure(code == 0 || args[0] == "cohtest", || format!("{args:?} exited {code}"))?;
            outs.push(files(&out));
        }
        ensure(!outs[0].is_empty(), || format!("{args:?} wrote nothing"))?;
        ensure(outs[0] == outs[1], || format!("{args:?}: output files differ between runs"))?;
        compared += outs[0].len();
    }
    Ok(format!("{} invocations repeated, {compared} files byte-identical", invocations.len()))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("mutual exclusion stress", c1_mutual_exclusion),
        ("bounded model check, lock", c2_lock_model_check),
        ("flush counterexample", c3_refcount_counterexample),
        ("publication safety", c4_publication),
        ("allocator soundness", c5_allocator),
        ("hash chaining", c6_hash_chaining),
        ("LRU/refcount eviction", c7_lru),
        ("offset portability", c8_offset_portability),
        ("directional TTFT, transfer only", c9_transfer_ttft),
        ("directional caching results", c10_caching),
        ("determinism", c11_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let label = format!("criterion {:>2}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str()) || label.ends_with(x.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let r = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match r {
            Ok(msg) => println!("{label} PASS  {name}: {msg} [{:.1?}]", t0.elapsed()),
            Err(msg) => {
                failed += 1;
                println!("{label} FAIL  {name}: {msg} [{:.1?}]", t0.elapsed());
            }
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
