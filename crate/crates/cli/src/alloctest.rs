//! Concurrent allocator exercise. One thread per node allocates, frees its
//! own blocks and frees blocks handed over by other nodes. A shared interval
//! map catches overlapping live ranges; tag words at both ends of every
//! allocation catch writes through a stale or overlapping block.

use std::collections::BTreeMap;
use std::sync::Arc;

use cxlkv_core::allocator::{usable_size, AllocError};
use cxlkv_core::memory::NodeId;
use cxlkv_core::shm::{Shm, ShmConfig};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct AllocConfig {
    pub nodes: u32,
    pub ops_per_node: u32,
    pub seed: u64,
    pub capacity: u64,
    pub chunk_size: u64,
}

/// Counters that depend on thread interleaving are kept apart from the
/// verdict so the verdict can be written reproducibly.
#[derive(Clone, Debug, Default, Serialize)]
pub struct AllocStats {
    pub allocs: u64,
    pub frees: u64,
    pub handoff_frees: u64,
    pub out_of_memory: u64,
    pub queue_full: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AllocVerdict {
    pub overlaps: u64,
    pub corrupted: u64,
    pub errors: Vec<String>,
    pub conservation: bool,
}

impl AllocVerdict {
    pub fn passed(&self) -> bool {
        self.overlaps == 0 && self.corrupted == 0 && self.errors.is_empty() && self.conservation
    }
}

struct Live {
    end: u64,
    tag: u64,
    footprint: u64,
}

#[derive(Default)]
struct Shared {
    live: BTreeMap<u64, Live>,
    handoff: Vec<u64>,
    overlaps: u64,
    corrupted: u64,
    errors: Vec<String>,
    stats: AllocStats,
}

/// Bytes an allocation of `size` takes out of the pool, header included.
fn footprint(size: u64, chunk: u64) -> u64 {
    let usable = usable_size(size, chunk);
    if size + 64 > chunk / 2 {
        usable
    } else {
        usable + 64
    }
}

pub fn run(cfg: &AllocConfig) -> Result<(AllocVerdict, AllocStats), String> {
    let shm = Shm::create(ShmConfig {
        capacity: cfg.capacity,
        nodes: cfg.nodes,
        lock_entries: 2,
        object_buckets: 16,
        chunk_size: cfg.chunk_size,
        remote_ring_slots: 64,
        ..ShmConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let shared = Arc::new(Mutex::new(Shared::default()));
    let threads: Vec<_> = (0..cfg.nodes)
        .map(|n| {
            let node = shm.join(NodeId(n)).map_err(|e| e.to_string());
            let shared = Arc::clone(&shared);
            let (ops, seed, chunk) = (cfg.ops_per_node, cfg.seed, cfg.chunk_size);
            std::thread::spawn(move || -> Result<(), String> {
                let node = node?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(n as u64 + 1)));
                let mut mine: Vec<u64> = Vec::new();
                let free_one = |off: u64, handed: bool, back: &mut Vec<u64>| -> Result<(), String> {
                    let live = {
                        let mut s = shared.lock();
                        s.live.remove(&off).expect("tracked")
                    };
                    let view = node.view();
                    let ok = view.load_fresh_u64(off).map_err(|e| e.to_string())? == live.tag
                        && view.load_fresh_u64(live.end - 8).map_err(|e| e.to_string())? == !live.tag;
                    let res = node.shfree(off);
                    let mut s = shared.lock();
                    if !ok {
                        s.corrupted += 1;
                    }
                    match res {
                        Ok(()) => {
                            s.stats.frees += 1;
                            s.stats.handoff_frees += handed as u64;
                        }
                        Err(AllocError::RemoteQueueFull(_)) => {
                            s.stats.queue_full += 1;
                            s.live.insert(off, live);
                            back.push(off);
                        }
                        Err(e) => s.errors.push(format!("free {off:#x}: {e}")),
                    }
                    Ok(())
                };
                for _ in 0..ops {
                    let roll: f64 = rng.gen();
                    if roll < 0.5 || mine.is_empty() {
                        let size = if rng.gen_bool(0.1) { rng.gen_range(chunk / 2..3 * chunk) } else { rng.gen_range(1..4096) };
                        match node.shmalloc(size) {
                            Ok(off) => {
                                let usable = usable_size(size, chunk);
                                let tag: u64 = rng.gen();
                                {
                                    let mut s = shared.lock();
                                    s.stats.allocs += 1;
                                    let end = off + usable;
                                    let before = s.live.range(..end).next_back().map(|(&o, l)| (o, l.end));
                                    let inside = s.live.range(off..end).next().is_some();
                                    if inside || matches!(before, Some((_, e)) if e > off) {
                                        s.overlaps += 1;
                                    }
                                    s.live.insert(off, Live { end, tag, footprint: footprint(size, chunk) });
                                }
                                let view = node.view();
                                view.store_through_u64(off, tag).map_err(|e| e.to_string())?;
                                view.store_through_u64(off + usable - 8, !tag).map_err(|e| e.to_string())?;
                                if rng.gen_bool(0.3) {
                                    shared.lock().handoff.push(off);
                                } else {
                                    mine.push(off);
                                }
                            }
                            Err(AllocError::OutOfMemory(_)) => shared.lock().stats.out_of_memory += 1,
                            Err(e) => shared.lock().errors.push(format!("alloc {size}: {e}")),
                        }
                    } else if roll < 0.75 {
                        let off = mine.swap_remove(rng.gen_range(0..mine.len()));
                        free_one(off, false, &mut mine)?;
                    } else {
                        let taken = {
                            let mut s = shared.lock();
                            let n = s.handoff.len();
                            (n > 0).then(|| s.handoff.swap_remove(rng.gen_range(0..n)))
                        };
                        if let Some(off) = taken {
                            free_one(off, true, &mut mine)?;
                        }
                    }
                }
                Ok(())
            })
        })
        .collect();
    for t in threads {
        t.join().map_err(|_| "allocator thread panicked".to_string())??;
    }
    let occ = shm.occupancy().map_err(|e| e.to_string())?;
    let s = shared.lock();
    let live: u64 = s.live.values().map(|l| l.footprint).sum();
    let accounted = live
        + occ.heap_free_bytes
        + occ.remote_pending_bytes
        + occ.free_chunk_bytes
        + occ.metadata_bytes;
    let mut errors = s.errors.clone();
    if accounted != occ.capacity {
        errors.push(format!("conservation: accounted {accounted} of {} bytes", occ.capacity));
    }
    Ok((
        AllocVerdict { overlaps: s.overlaps, corrupted: s.corrupted, errors, conservation: accounted == occ.capacity },
        s.stats.clone(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn footprints() {
        let c = 64 << 10;
        assert_eq!(footprint(1, c), 128);
        assert_eq!(footprint(65, c), 256);
        assert_eq!(footprint(c / 2 - 64, c), c / 2);
        assert_eq!(footprint(c / 2, c), c);
        assert_eq!(footprint(c + 1, c), 2 * c);
    }

    #[test]
    fn concurrent_run_is_sound() {
        let cfg = AllocConfig { nodes: 3, ops_per_node: 1500, seed: 4, capacity: 8 << 20, chunk_size: 64 << 10 };
        let (v, stats) = run(&cfg).unwrap();
        assert!(v.passed(), "{v:?}");
        assert!(stats.allocs > 0 && stats.handoff_frees > 0);
    }
}
