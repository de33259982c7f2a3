//! `cxlkv` command line. Exit status: 0 success, 1 a test or property
//! failed, 2 bad arguments or configuration.

pub mod alloctest;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use cxlkv_core::check::{run_check, CheckConfig, CheckReport, Scenario};
use cxlkv_core::interlock::stress_counter;
use cxlkv_core::memory::{FlushDiscipline, NodeId};
use cxlkv_core::prefixcache::{block_hashes, KvBlockSpec, PrefixIndex};
use cxlkv_core::shm::{Shm, ShmConfig};
use cxlkv_sim::{export_cdf, export_metrics, Mode, SimConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "cxlkv", version, about = "Shared-memory KV cache toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate serving and export per-request metrics.
    Bench(BenchArgs),
    /// Lock-protected counter stress across nodes and threads.
    Locktest(LockArgs),
    /// Concurrent random alloc/free against an interval oracle.
    Alloctest(AllocArgs),
    /// Exhaustively check the reference-count flush example.
    Cohtest(CohArgs),
    /// Exhaustive bounded exploration of a protocol scenario.
    Modelcheck(CheckArgs),
    /// Build a small index and print allocator and index state as JSON.
    Dump(DumpArgs),
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// TOML file with [workload], [timing], [workers] and [run] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub qps: Option<f64>,
    /// Also write ttft_cdf.csv.
    #[arg(long)]
    pub emit_cdf: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct LockArgs {
    #[arg(long, default_value_t = 4)]
    pub nodes: u32,
    #[arg(long, default_value_t = 8)]
    pub threads: u32,
    #[arg(long, default_value_t = 1000)]
    pub iters: u32,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Repeat with this many consecutive seeds.
    #[arg(long, default_value_t = 1)]
    pub seeds: u32,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct AllocArgs {
    #[arg(long, default_value_t = 2)]
    pub nodes: u32,
    /// Operations per node.
    #[arg(long, default_value_t = 5000)]
    pub iters: u32,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 16 << 20)]
    pub capacity: u64,
    #[arg(long, default_value_t = 64 << 10)]
    pub chunk_size: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct CohArgs {
    #[arg(long, default_value = "clflush")]
    pub discipline: FlushDiscipline,
    /// Adversary actions allowed along one schedule.
    #[arg(long, default_value_t = 10)]
    pub bound: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct CheckArgs {
    #[arg(long, default_value = "lock")]
    pub scenario: Scenario,
    #[arg(long, default_value = "clflush")]
    pub discipline: FlushDiscipline,
    #[arg(long, default_value_t = 10)]
    pub bound: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct DumpArgs {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub nodes: u32,
    /// Prompts to insert.
    #[arg(long, default_value_t = 8)]
    pub iters: u32,
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

/// A failure with its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

fn config_err(m: impl std::fmt::Display) -> Failure {
    Failure { code: EXIT_CONFIG, message: m.to_string() }
}

fn fail(m: impl std::fmt::Display) -> Failure {
    Failure { code: EXIT_FAIL, message: m.to_string() }
}

type Outcome = Result<(), Failure>;

/// Parse `argv` (program name first) and run. Returns the exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn run(command: Command) -> Outcome {
    match command {
        Command::Bench(a) => bench(a),
        Command::Locktest(a) => locktest(a),
        Command::Alloctest(a) => alloc(a),
        Command::Cohtest(a) => cohtest(a),
        Command::Modelcheck(a) => modelcheck(a),
        Command::Dump(a) => dump(a),
    }
}

fn write(path: &Path, text: &str) -> Outcome {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| config_err(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

/// Record the resolved arguments of a subcommand under `[name]`.
fn record_args<T: Serialize>(out: &Path, name: &str, args: &T) -> Outcome {
    let mut table = toml::Table::new();
    table.insert(name.to_string(), toml::Value::try_from(args).map_err(config_err)?);
    write(&out.join("config.toml"), &toml::to_string(&table).map_err(config_err)?)
}

pub fn bench(a: BenchArgs) -> Outcome {
    let mut cfg = match &a.config {
        Some(p) => SimConfig::load(p).map_err(config_err)?,
        None => SimConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.workload.seed = s;
    }
    if let Some(m) = a.mode {
        cfg.run.mode = m;
    }
    if let Some(q) = a.qps {
        cfg.workload.qps = q;
    }
    cfg.validate().map_err(config_err)?;
    let summary = cfg.run().map_err(|e| if e.is_config() { config_err(e) } else { fail(e) })?;
    export_metrics(&summary, &a.out).map_err(config_err)?;
    if a.emit_cdf {
        export_cdf(&summary, &a.out).map_err(config_err)?;
    }
    write(&a.out.join("config.toml"), &cfg.to_toml())?;
    let g = &summary.aggregates;
    println!(
        "{} requests={} throughput={:.3}/s avg_ttft={:.4}s p50={:.4}s p99={:.4}s hit_rate={:.3}",
        g.mode, g.requests, g.throughput, g.avg_ttft, g.p50_ttft, g.p99_ttft, g.hit_rate
    );
    Ok(())
}

#[derive(Serialize)]
struct LockRun {
    seed: u64,
    expected: u64,
    observed: u64,
    flush_discipline_ok: bool,
    passed: bool,
}

pub fn locktest(a: LockArgs) -> Outcome {
    if a.nodes == 0 || a.threads == 0 || a.seeds == 0 {
        return Err(config_err("nodes, threads and seeds must be at least 1"));
    }
    let mut runs = Vec::new();
    for seed in a.seed..a.seed + a.seeds as u64 {
        let r = stress_counter(a.nodes, a.threads, a.iters, seed, true).map_err(fail)?;
        println!(
            "seed {seed}: {}/{} increments, {} grants, {} adversary actions, {} ms",
            r.observed, r.expected, r.manager_grants, r.adversary_actions, r.elapsed_ms
        );
        let flush_ok = r.flush_discipline_checked.is_some();
        runs.push(LockRun { seed, expected: r.expected, observed: r.observed, flush_discipline_ok: flush_ok, passed: r.passed() && flush_ok });
    }
    let passed = runs.iter().all(|r| r.passed);
    if let Some(out) = &a.out {
        record_args(out, "locktest", &a)?;
        write(&out.join("locktest.json"), &json(&runs))?;
    }
    if passed {
        Ok(())
    } else {
        Err(fail("lost or duplicated increments"))
    }
}

pub fn alloc(a: AllocArgs) -> Outcome {
    if a.nodes == 0 {
        return Err(config_err("nodes must be at least 1"));
    }
    let cfg = alloctest::AllocConfig {
        nodes: a.nodes,
        ops_per_node: a.iters,
        seed: a.seed,
        capacity: a.capacity,
        chunk_size: a.chunk_size,
    };
    let (verdict, stats) = alloctest::run(&cfg).map_err(config_err)?;
    println!(
        "allocs={} frees={} handoff_frees={} oom={} queue_full={} overlaps={} corrupted={} conservation={}",
        stats.allocs,
        stats.frees,
        stats.handoff_frees,
        stats.out_of_memory,
        stats.queue_full,
        verdict.overlaps,
        verdict.corrupted,
        verdict.conservation
    );
    for e in &verdict.errors {
        println!("  {e}");
    }
    if let Some(out) = &a.out {
        record_args(out, "alloctest", &a)?;
        write(&out.join("alloctest.json"), &json(&verdict))?;
    }
    if verdict.passed() {
        Ok(())
    } else {
        Err(fail("allocator oracle violation"))
    }
}

/// Report fields that do not depend on wall-clock time.
fn stable_report(r: &CheckReport) -> serde_json::Value {
    let mut v = serde_json::to_value(r).expect("serializable");
    if let Some(m) = v.as_object_mut() {
        m.remove("elapsed_ms");
    }
    v
}

fn check(cfg: CheckConfig, out: Option<&Path>, name: &str, args: &impl Serialize) -> Outcome {
    let r = run_check(&cfg).map_err(config_err)?;
    println!(
        "{} under {}: {} states, {} transitions ({} adversary), depth {}, {} violations, {} ms{}",
        cfg.scenario,
        cfg.discipline,
        r.states,
        r.transitions,
        r.adversary_transitions,
        r.max_depth,
        r.violation_count,
        r.elapsed_ms,
        if r.complete { "" } else { ", INCOMPLETE" }
    );
    if let Some(v) = r.violations.first() {
        println!("violating schedule ({:?}: {}):", v.kind, v.detail);
        for (i, step) in v.trace.iter().enumerate() {
            println!("  {i:>3}. {step}");
        }
    }
    if let Some(out) = out {
        record_args(out, name, args)?;
        write(&out.join(format!("{name}.json")), &json(&stable_report(&r)))?;
    }
    if r.violation_count > 0 {
        Err(fail(format!("{} violating schedules", r.violation_count)))
    } else if !r.complete {
        Err(fail("state limit reached before the search finished"))
    } else {
        Ok(())
    }
}

pub fn cohtest(a: CohArgs) -> Outcome {
    let cfg = CheckConfig::new(Scenario::Refcount, a.discipline, a.bound);
    check(cfg, a.out.as_deref(), "cohtest", &a)
}

pub fn modelcheck(a: CheckArgs) -> Outcome {
    let cfg = CheckConfig::new(a.scenario, a.discipline, a.bound);
    check(cfg, a.out.as_deref(), "modelcheck", &a)
}

#[derive(Serialize)]
struct Dump {
    occupancy: cxlkv_core::allocator::Occupancy,
    index: cxlkv_core::prefixcache::IndexDump,
}

/// Insert `iters` prompts that share stems, pin the first, and dump.
pub fn dump(a: DumpArgs) -> Outcome {
    if a.nodes == 0 {
        return Err(config_err("nodes must be at least 1"));
    }
    let shm = Shm::create(ShmConfig { capacity: 64 << 20, nodes: a.nodes, chunk_size: 256 << 10, ..ShmConfig::default() })
        .map_err(config_err)?;
    let nodes: Vec<_> = (0..a.nodes).map(|n| shm.join(NodeId(n))).collect::<Result<_, _>>().map_err(fail)?;
    let spec = KvBlockSpec { tokens_per_block: 16, bytes_per_token: 2048 };
    let index = PrefixIndex::create(&nodes[0], "prefix_index", 256, spec).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let stems: Vec<Vec<u32>> = (0..3).map(|_| (0..64).map(|_| rng.gen()).collect()).collect();
    let mut first = None;
    for i in 0..a.iters {
        let node = &nodes[i as usize % nodes.len()];
        let stem = &stems[rng.gen_range(0..stems.len())];
        let mut tokens = stem[..rng.gen_range(16..=64)].to_vec();
        tokens.extend((0..rng.gen_range(1..40)).map(|_| rng.gen::<u32>()));
        let hashes = block_hashes(&tokens, 16);
        let hit = index.lookup_and_pin(node, &hashes).map_err(fail)?;
        for (b, h) in hashes.iter().enumerate().skip(hit.hit_len) {
            let count = (tokens.len() - b * 16).min(16) as u32;
            let p = index.insert_pending(node, *h, count).map_err(fail)?;
            let done = shm.region().dma_write_modeled(p.kv_ref.0, p.kv_size).map_err(fail)?;
            index.publish(node, p.entry, done).map_err(fail)?;
        }
        index.unpin(node, &hit.entries).map_err(fail)?;
        first.get_or_insert(hashes);
    }
    // Pin the first prompt so the dump shows live references.
    if let Some(h) = first {
        index.lookup_and_pin(&nodes[0], &h).map_err(fail)?;
    }
    let d = Dump { occupancy: shm.occupancy().map_err(fail)?, index: index.dump(&nodes[0]).map_err(fail)? };
    let text = json(&d);
    match &a.out {
        Some(out) => {
            record_args(out, "dump", &a)?;
            write(&out.join("dump.json"), &text)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
