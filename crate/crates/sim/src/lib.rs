//! Discrete-event simulator of disaggregated LLM serving. Prefill and decode
//! run on separate workers and exchange KV either over the network or
//! through a shared memory pool holding a rack-wide prefix cache. The pool
//! mode drives the real `cxlkv-core` prefix index under virtual time.

pub mod config;
pub mod engine;
pub mod metrics;
pub mod timing;
pub mod workload;

use cxlkv_core::memory::MemError;
use cxlkv_core::prefixcache::PrefixError;
use thiserror::Error;

pub use config::{RunSection, SimConfig};
pub use engine::{run_simulation, Mode, Workers};
pub use metrics::{export_cdf, export_metrics, Aggregates, RequestMetrics, RunSummary};
pub use timing::{Path, Phase, TimingModel};
pub use workload::{generate_workload, Preset, Request, WorkloadMode, WorkloadSpec};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config: {0}")]
    Config(String),
    #[error("request {request} needs {bytes} bytes of GPU KV capacity")]
    Capacity { request: u64, bytes: u64 },
    #[error("request {0} never completed")]
    Stalled(u64),
    #[error(transparent)]
    Cache(#[from] PrefixError),
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error("io: {0}")]
    Io(String),
}

impl SimError {
    pub fn is_config(&self) -> bool {
        matches!(self, SimError::Config(_) | SimError::Capacity { .. })
    }
}
