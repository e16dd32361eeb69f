//! Aggregate run configuration: every stage's parameters in one
//! JSON-serializable structure with strict unknown-key rejection.

use crate::geometry::RansacConfig;
use crate::observer::ObserverConfig;
use crate::pipeline::{ExecMode, QueueConfig};
use crate::propagation::{GridSpec, PropagationConfig};
use crate::renderer::BorderPolicy;
use crate::smoother::SmootherConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config value: {0}")]
    Invalid(String),
    #[error("config parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub rows: usize,
    pub cols: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { rows: 16, cols: 16 }
    }
}

impl GridConfig {
    pub fn spec_for(&self, width: usize, height: usize) -> GridSpec {
        GridSpec::new(self.rows, self.cols, width, height)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: ExecMode,
    pub border_policy: BorderPolicy,
    /// Master seed; per-frame seeds derive from it deterministically.
    pub seed: u64,
    /// Sliding window (frames) for the causal border accumulator.
    pub border_window: usize,
    pub grid: GridConfig,
    pub observer: ObserverConfig,
    pub propagation: PropagationConfig,
    pub smoother: SmootherConfig,
    pub ransac: RansacConfig,
    pub queues: QueueConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: ExecMode::default(),
            border_policy: BorderPolicy::default(),
            seed: 0,
            border_window: 30,
            grid: GridConfig::default(),
            observer: ObserverConfig::default(),
            propagation: PropagationConfig::default(),
            smoother: SmootherConfig::default(),
            ransac: RansacConfig::default(),
            queues: QueueConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.grid.rows < 2 || self.grid.cols < 2 {
            return Err(ConfigError::Invalid("grid.rows/cols must be >= 2".into()));
        }
        if self.border_window == 0 {
            return Err(ConfigError::Invalid("border_window must be >= 1".into()));
        }
        self.observer.validate().map_err(ConfigError::Invalid)?;
        self.propagation.validate().map_err(ConfigError::Invalid)?;
        self.smoother.validate().map_err(ConfigError::Invalid)?;
        self.ransac.validate().map_err(ConfigError::Invalid)?;
        self.queues.validate().map_err(ConfigError::Invalid)?;
        Ok(())
    }

    /// Effective RANSAC config with the master seed folded in.
    pub fn ransac_seeded(&self) -> RansacConfig {
        let mut r = self.ransac.clone();
        r.seed = r.seed.wrapping_add(self.seed.wrapping_mul(0x9E37_79B9));
        r
    }
}
