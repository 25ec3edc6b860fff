//! File formats: experiment config (JSON), `traces.csv`, `calib.csv`, and
//! the JSON result documents.

pub mod config;
pub mod tables;

use serde::{Deserialize, Serialize};

use crate::fit::FitResult;

pub use config::{parse_config, ExperimentConfig, ResolvedConfig, ResolvedProtocol};
pub use tables::{read_calibration, read_trace, write_calibration, write_trace};

/// Contents of `fit.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    #[serde(flatten)]
    pub fit: FitResult,
    /// SHA-256 of the input trace file, hex encoded.
    pub input_sha256: String,
}
