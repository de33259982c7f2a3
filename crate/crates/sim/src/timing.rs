//! Cost model for transfers and compute. All durations are seconds.

use serde::{Deserialize, Serialize};

use crate::SimError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Path {
    /// Device DMA between a GPU and the shared memory pool.
    Cxl,
    /// NIC transfer between hosts, staged through host DRAM.
    Rdma,
    /// PCIe DMA between a GPU and its own host DRAM.
    Host,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Prefill,
    Decode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingModel {
    pub cxl_latency: f64,
    /// Bytes per second.
    pub cxl_bandwidth: f64,
    /// Bits per second on the wire.
    pub rdma_link_bps: f64,
    pub rdma_latency: f64,
    /// Times each byte crosses a bandwidth-limited stage (GPU to host, NIC,
    /// host to GPU). At least 1.
    pub rdma_host_copies: u32,
    pub host_latency: f64,
    pub host_bandwidth: f64,
    /// Prefill cost `a * t + b * t^2` over missed tokens `t`.
    pub prefill_per_token: f64,
    pub prefill_quadratic: f64,
    /// Cost of one decode iteration, which yields one token per running request.
    pub decode_per_token: f64,
    pub bytes_per_token: u64,
}

impl Default for TimingModel {
    fn default() -> Self {
        Self {
            cxl_latency: 640e-9,
            cxl_bandwidth: 10.1e9,
            rdma_link_bps: 100e9,
            rdma_latency: 5e-6,
            rdma_host_copies: 3,
            host_latency: 1e-6,
            host_bandwidth: 25e9,
            prefill_per_token: 20e-6,
            prefill_quadratic: 0.0,
            decode_per_token: 15e-3,
            // 32 layers x 8 KV heads x 128 dims x (K, V) x 2 bytes.
            bytes_per_token: 131_072,
        }
    }
}

impl TimingModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let rates = [
            ("cxl_bandwidth", self.cxl_bandwidth),
            ("rdma_link_bps", self.rdma_link_bps),
            ("host_bandwidth", self.host_bandwidth),
        ];
        for (k, v) in rates {
            if !(v.is_finite() && v > 0.0) {
                return Err(SimError::Config(format!("timing.{k} must be positive")));
            }
        }
        let costs = [
            ("cxl_latency", self.cxl_latency),
            ("rdma_latency", self.rdma_latency),
            ("host_latency", self.host_latency),
            ("prefill_per_token", self.prefill_per_token),
            ("prefill_quadratic", self.prefill_quadratic),
            ("decode_per_token", self.decode_per_token),
        ];
        for (k, v) in costs {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SimError::Config(format!("timing.{k} must be non-negative")));
            }
        }
        if self.rdma_host_copies == 0 {
            return Err(SimError::Config("timing.rdma_host_copies must be at least 1".into()));
        }
        if self.bytes_per_token == 0 {
            return Err(SimError::Config("timing.bytes_per_token must be positive".into()));
        }
        Ok(())
    }

    /// Duration of one message of `bytes` on `path`.
    pub fn transfer_time(&self, path: Path, bytes: u64) -> f64 {
        let b = bytes as f64;
        match path {
            Path::Cxl => self.cxl_latency + b / self.cxl_bandwidth,
            Path::Rdma => (self.rdma_latency + b / (self.rdma_link_bps / 8.0)) * self.rdma_host_copies as f64,
            Path::Host => self.host_latency + b / self.host_bandwidth,
        }
    }

    /// Duration of sending each block as its own message, back to back.
    pub fn blocks_time(&self, path: Path, block_bytes: &[u64]) -> f64 {
        block_bytes.iter().map(|&b| self.transfer_time(path, b)).sum()
    }

    pub fn compute_time(&self, phase: Phase, tokens: u64) -> f64 {
        let t = tokens as f64;
        match phase {
            Phase::Prefill => self.prefill_per_token * t + self.prefill_quadratic * t * t,
            Phase::Decode => self.decode_per_token * t,
        }
    }
}
