//! Run configuration, read from a TOML key-value file.
//!
//! ```toml
//! modality = "t1"          # t1 | t2
//! acceleration = 4
//! rank = 3
//! seed = 1
//! output = "out"
//! weights = "weights.drum" # required for the drums method
//!
//! [solver]
//! lambda = 0.01
//! iterations = 100
//! restart = true
//! power_iterations = 30
//! step_safety = 0.95
//! wavelet_levels = 4
//!
//! [calibration]
//! kernel = [6, 6]
//! threshold = 0.02
//! crop = 0.9
//! acs_lines = 24
//! ```
//!
//! Every key is optional; missing keys take the defaults shown.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cs_solver::SolverConfig;
use crate::espirit::CalibrationConfig;
use crate::fitting::Modality;

use super::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub modality: Modality,
    pub acceleration: usize,
    pub rank: usize,
    pub seed: u64,
    pub output: PathBuf,
    pub weights: Option<PathBuf>,
    pub solver: SolverConfig,
    pub calibration: CalibrationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            modality: Modality::T1,
            acceleration: 4,
            rank: 3,
            seed: 1,
            output: PathBuf::from("out"),
            weights: None,
            solver: SolverConfig::default(),
            calibration: CalibrationConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.acceleration == 0 {
            return bad("acceleration must be >= 1".into());
        }
        if self.rank == 0 {
            return bad("rank must be >= 1".into());
        }
        if !(self.solver.lambda >= 0.0 && self.solver.lambda.is_finite()) {
            return bad(format!("solver.lambda = {}", self.solver.lambda));
        }
        if self.solver.iterations == 0 || self.solver.power_iterations == 0 {
            return bad("solver iteration counts must be >= 1".into());
        }
        if !(self.solver.step_safety > 0.0 && self.solver.step_safety <= 1.0) {
            return bad(format!("solver.step_safety = {}", self.solver.step_safety));
        }
        self.calibration
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))
    }
}
