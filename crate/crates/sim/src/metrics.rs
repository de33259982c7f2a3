//! Per-request rows, aggregates and their file formats.
//!
//! `requests.csv` columns, in order: id, arrival, schedule_wait, kv_read,
//! compute, kv_write, ttft, completion, input_tokens, output_tokens,
//! hit_blocks, miss_blocks, decode_wait, decode_read, kv_write_bytes,
//! kv_write_hit_bytes, prefill_worker, decode_worker. Times are seconds;
//! `arrival` and `completion` are absolute, the rest are spans.
//! `summary.json` holds one `Aggregates` object. `ttft_cdf.csv` has columns
//! percentile, ttft.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::Mode;
use crate::SimError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestMetrics {
    pub id: u64,
    pub arrival: f64,
    pub schedule_wait: f64,
    pub kv_read: f64,
    pub compute: f64,
    pub kv_write: f64,
    pub ttft: f64,
    pub completion: f64,
    pub input_tokens: u32,
    pub output_tokens: u32,
    pub hit_blocks: u32,
    pub miss_blocks: u32,
    pub decode_wait: f64,
    pub decode_read: f64,
    pub kv_write_bytes: u64,
    /// Bytes written for blocks that were cache hits at lookup.
    pub kv_write_hit_bytes: u64,
    pub prefill_worker: u32,
    pub decode_worker: u32,
}

/// Whole-run counters collected by the engine.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub cxl_bytes: u64,
    pub rdma_bytes: u64,
    pub host_bytes: u64,
    pub peak_prefill_kv: u64,
    pub peak_decode_kv: u64,
    pub gpu_kv_capacity: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mode: Mode,
    pub requests: usize,
    pub avg_ttft: f64,
    pub p50_ttft: f64,
    pub p99_ttft: f64,
    /// Completed requests per second from first arrival to last completion.
    pub throughput: f64,
    /// Requests per second from first to last arrival.
    pub arrival_rate: f64,
    pub makespan: f64,
    pub hit_rate: f64,
    pub hit_blocks: u64,
    pub total_blocks: u64,
    pub mean_schedule_wait: f64,
    pub mean_kv_read: f64,
    pub mean_compute: f64,
    pub mean_kv_write: f64,
    pub mean_decode_wait: f64,
    pub mean_decode_read: f64,
    pub kv_write_bytes: u64,
    pub kv_write_hit_bytes: u64,
    #[serde(flatten)]
    pub totals: Totals,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub requests: Vec<RequestMetrics>,
    pub aggregates: Aggregates,
}

/// Nearest-rank percentile of a sorted slice; 0 when empty.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl RunSummary {
    pub fn from_rows(mode: Mode, rows: Vec<RequestMetrics>, totals: Totals) -> Self {
        let mut ttft: Vec<f64> = rows.iter().map(|r| r.ttft).collect();
        ttft.sort_by(f64::total_cmp);
        let first = rows.iter().map(|r| r.arrival).fold(f64::INFINITY, f64::min);
        let last_arrival = rows.iter().map(|r| r.arrival).fold(f64::NEG_INFINITY, f64::max);
        let last_done = rows.iter().map(|r| r.completion).fold(f64::NEG_INFINITY, f64::max);
        let makespan = if rows.is_empty() { 0.0 } else { last_done - first };
        let rate = |span: f64| if span > 0.0 { rows.len() as f64 / span } else { 0.0 };
        let hit_blocks: u64 = rows.iter().map(|r| r.hit_blocks as u64).sum();
        let total_blocks: u64 = rows.iter().map(|r| (r.hit_blocks + r.miss_blocks) as u64).sum();
        let aggregates = Aggregates {
            mode,
            requests: rows.len(),
            avg_ttft: mean(ttft.iter().copied()),
            p50_ttft: percentile(&ttft, 50.0),
            p99_ttft: percentile(&ttft, 99.0),
            throughput: rate(makespan),
            arrival_rate: if rows.is_empty() { 0.0 } else { rate(last_arrival - first) },
            makespan,
            hit_rate: if total_blocks == 0 { 0.0 } else { hit_blocks as f64 / total_blocks as f64 },
            hit_blocks,
            total_blocks,
            mean_schedule_wait: mean(rows.iter().map(|r| r.schedule_wait)),
            mean_kv_read: mean(rows.iter().map(|r| r.kv_read)),
            mean_compute: mean(rows.iter().map(|r| r.compute)),
            mean_kv_write: mean(rows.iter().map(|r| r.kv_write)),
            mean_decode_wait: mean(rows.iter().map(|r| r.decode_wait)),
            mean_decode_read: mean(rows.iter().map(|r| r.decode_read)),
            kv_write_bytes: rows.iter().map(|r| r.kv_write_bytes).sum(),
            kv_write_hit_bytes: rows.iter().map(|r| r.kv_write_hit_bytes).sum(),
            totals,
        };
        Self { requests: rows, aggregates }
    }

    /// (percentile, ttft) at every integer percentile from 1 to 100.
    pub fn ttft_cdf(&self) -> Vec<(u32, f64)> {
        let mut t: Vec<f64> = self.requests.iter().map(|r| r.ttft).collect();
        t.sort_by(f64::total_cmp);
        (1..=100).map(|p| (p, percentile(&t, p as f64))).collect()
    }
}

fn io(path: &Path, e: impl std::fmt::Display) -> SimError {
    SimError::Io(format!("{}: {e}", path.display()))
}

/// Write `requests.csv` and `summary.json` into `dir`, creating it.
pub fn export_metrics(summary: &RunSummary, dir: &Path) -> Result<(), SimError> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let csv_path = dir.join("requests.csv");
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&csv_path).map_err(|e| io(&csv_path, e))?;
    w.write_record(CSV_COLUMNS).map_err(|e| io(&csv_path, e))?;
    for r in &summary.requests {
        w.serialize(r).map_err(|e| io(&csv_path, e))?;
    }
    w.flush().map_err(|e| io(&csv_path, e))?;
    let json_path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&summary.aggregates).map_err(|e| io(&json_path, e))?;
    fs::write(&json_path, json + "\n").map_err(|e| io(&json_path, e))
}

/// Write the TTFT CDF as `ttft_cdf.csv` into `dir`.
pub fn export_cdf(summary: &RunSummary, dir: &Path) -> Result<(), SimError> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let path = dir.join("ttft_cdf.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| io(&path, e))?;
    w.write_record(["percentile", "ttft"]).map_err(|e| io(&path, e))?;
    for (p, t) in summary.ttft_cdf() {
        w.serialize((p, t)).map_err(|e| io(&path, e))?;
    }
    w.flush().map_err(|e| io(&path, e))
}

pub const CSV_COLUMNS: [&str; 18] = [
    "id",
    "arrival",
    "schedule_wait",
    "kv_read",
    "compute",
    "kv_write",
    "ttft",
    "completion",
    "input_tokens",
    "output_tokens",
    "hit_blocks",
    "miss_blocks",
    "decode_wait",
    "decode_read",
    "kv_write_bytes",
    "kv_write_hit_bytes",
    "prefill_worker",
    "decode_worker",
];
