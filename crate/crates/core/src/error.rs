use std::path::PathBuf;

use crate::sequence::Violation;

/// Errors produced by the simulation and analysis routines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parameter `{name}` out of domain: {reason}")]
    ParameterDomain { name: &'static str, reason: String },

    #[error("propagation exponent {exponent:.3e} exceeds the cap {cap:.1e}")]
    Overflow { exponent: f64, cap: f64 },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("rate matrix has no unique steady state: {0}")]
    Degenerate(String),

    #[error("pulse sequence is invalid: {}", format_violations(.0))]
    InvalidSequence(Vec<Violation>),

    #[error("degenerate readout: sig1 + sig2 = 0{}", .tau_s.map(|t| format!(" at tau = {t} s")).unwrap_or_default())]
    DegenerateReadout { tau_s: Option<f64> },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("inconsistent measurement: {0}")]
    Inconsistent(String),

    #[error("bootstrap unstable: {failed} of {total} resample fits failed")]
    BootstrapUnstable { failed: usize, total: usize },

    #[error("detection limit undefined: calibration slope is zero")]
    UndefinedLod,

    #[error("unit mismatch: expected {expected}, found {found}")]
    UnitMismatch { expected: String, found: String },

    #[error("parse error at `{path}`: {message}")]
    Parse { path: String, message: String },

    #[error("invalid value for `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("schema error in column `{column}`{}: {message}", .row.map(|r| format!(" (row {r})")).unwrap_or_default())]
    Schema {
        column: String,
        row: Option<usize>,
        message: String,
    },

    #[error("I/O error on {path}: {source}", path = .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

pub(crate) fn domain(name: &'static str, reason: impl Into<String>) -> Error {
    Error::ParameterDomain {
        name,
        reason: reason.into(),
    }
}

pub(crate) fn ensure_nonneg(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(domain(name, format!("expected a finite value >= 0, got {value}")))
    }
}

pub(crate) fn ensure_positive(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(domain(name, format!("expected a finite value > 0, got {value}")))
    }
}

pub(crate) fn ensure_fraction(name: &'static str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(domain(name, format!("expected a fraction in [0, 1], got {value}")))
    }
}
