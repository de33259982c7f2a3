//! TOML run configuration: `[workload]`, `[timing]`, `[workers]`, `[run]`.
//! Every key is optional; omitted keys take the defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{run_simulation, Mode, Workers};
use crate::metrics::RunSummary;
use crate::timing::TimingModel;
use crate::workload::{generate_workload, WorkloadSpec};
use crate::SimError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub mode: Mode,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { mode: Mode::Tract }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub workload: WorkloadSpec,
    pub timing: TimingModel,
    pub workers: Workers,
    pub run: RunSection,
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let cfg: Self = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.workload.validate()?;
        self.timing.validate()
    }

    /// The fully resolved config, reloadable with `from_toml`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Generate the workload and run it.
    pub fn run(&self) -> Result<RunSummary, SimError> {
        self.validate()?;
        let requests = generate_workload(&self.workload)?;
        run_simulation(&requests, self.run.mode, &self.timing, &self.workers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{Preset, WorkloadMode};

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = SimConfig::from_toml(
            "[workload]\nmode = \"static\"\ninput_len = 1500\nqps = 1.5\n\n[run]\nmode = \"nixl\"\n",
        )
        .unwrap();
        assert_eq!(cfg.workload.mode, WorkloadMode::Static);
        assert_eq!(cfg.workload.input_len, 1500);
        assert_eq!(cfg.run.mode, Mode::Nixl);
        assert_eq!(cfg.timing, TimingModel::default());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = SimConfig::default();
        cfg.workload.preset = Preset::C;
        cfg.workload.unique_std = Some(1000.0);
        cfg.timing.rdma_host_copies = 2;
        let text = cfg.to_toml();
        assert_eq!(SimConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn malformed_files_are_config_errors() {
        for bad in ["[workload]\nqps = \"fast\"\n", "[nope]\nx = 1\n", "[timing]\ncxl_bandwidth = 0.0\n", "garbage"] {
            assert!(SimConfig::from_toml(bad).unwrap_err().is_config(), "{bad}");
        }
        assert!(SimConfig::load(Path::new("/nonexistent/missing.cfg")).unwrap_err().is_config());
    }
}
