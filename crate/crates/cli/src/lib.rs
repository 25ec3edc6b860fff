//! Command implementations behind the `nvrelax` binary.
//!
//! Each command reads its inputs, calls into [`nvrelax`], and writes its
//! outputs atomically (temporary file in the target directory, then rename),
//! so an interrupted run never leaves a truncated result behind.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nvrelax::io::{parse_config, read_calibration, read_trace, write_trace, FitReport, ResolvedConfig};
use nvrelax::{
    fit_calibration, fit_exponential, quantify, sweep, CalibrationModel, CalibrationOptions, FitOptions,
    Quantification, Trace,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub mod plot;

pub use plot::{data_path, plot, PlotData, Series};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] nvrelax::Error),
    #[error("fit did not converge after {iterations} iterations (result written to {})", path.display())]
    NotConverged { iterations: usize, path: PathBuf },
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(nvrelax::Error::Io { .. }) => EXIT_IO,
            CliError::Core(_) | CliError::Invalid(_) => EXIT_VALIDATION,
            CliError::NotConverged { .. } => EXIT_NOT_CONVERGED,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(nvrelax::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_error(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_error(path, e))
}

/// Writes `bytes` to `path` through a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    builder.permissions(output_permissions(path));
    let mut tmp = builder.tempfile_in(dir).map_err(|e| io_error(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_error(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_error(path, e))?;
    tmp.persist(path).map_err(|e| io_error(path, e.error))?;
    Ok(())
}

/// Keeps the mode of a file being replaced; new files get `0644`.
#[cfg(unix)]
fn output_permissions(path: &Path) -> fs::Permissions {
    use std::os::unix::fs::PermissionsExt;
    fs::metadata(path)
        .map(|m| m.permissions())
        .unwrap_or_else(|_| fs::Permissions::from_mode(0o644))
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(value).expect("result types serialize");
    text.push('\n');
    text.into_bytes()
}

fn from_json<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        CliError::Invalid(format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column()))
    })
}

/// `t.csv` → `t.resolved.json`.
pub fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("resolved.json")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Runs the configured sweep and writes `traces.csv` plus the resolved
/// config sidecar.
pub fn simulate(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<ResolvedConfig> {
    let text = read_text(config_path)?;
    let resolved = parse_config(&text)?.resolve(seed)?;
    let trace = simulate_resolved(&resolved)?;
    let mut csv = Vec::new();
    write_trace(&mut csv, &trace)?;
    write_atomic(out, &csv)?;
    write_atomic(&sidecar_path(out), &to_json(&resolved))?;
    Ok(resolved)
}

pub fn simulate_resolved(resolved: &ResolvedConfig) -> Result<Trace> {
    let protocol = resolved.protocol.to_protocol()?;
    let budget = resolved.budget()?;
    Ok(sweep(&protocol, &resolved.photophysics, &budget, &resolved.detector, resolved.seed)?)
}

/// Fits a trace file and writes `fit.json`. A fit that stops without
/// converging is still written, then reported as [`CliError::NotConverged`].
pub fn fit(input: &Path, out: &Path, options: &FitOptions) -> Result<FitReport> {
    let bytes = read_bytes(input)?;
    let trace = read_trace(bytes.as_slice())?;
    let result = fit_exponential(&trace, None, options)?;
    let report = FitReport {
        fit: result,
        input_sha256: sha256_hex(&bytes),
    };
    write_atomic(out, &to_json(&report))?;
    if !report.fit.converged {
        return Err(CliError::NotConverged {
            iterations: report.fit.iterations,
            path: out.to_path_buf(),
        });
    }
    Ok(report)
}

pub fn calibrate(input: &Path, out: &Path, k: f64, sigma_floor_ms: f64) -> Result<CalibrationModel> {
    let bytes = read_bytes(input)?;
    let points = read_calibration(bytes.as_slice())?;
    let options = CalibrationOptions {
        k_factor: k,
        sigma_floor_ms,
    };
    let model = fit_calibration(&points, &options)?;
    write_atomic(out, &to_json(&model))?;
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<CalibrationModel> {
    from_json(path, &read_text(path)?)
}

pub fn load_fit(path: &Path) -> Result<FitReport> {
    from_json(path, &read_text(path)?)
}

pub fn quantify_cmd(model_path: &Path, t1_ms: f64, t1_err_ms: f64) -> Result<Quantification> {
    let model = load_model(model_path)?;
    Ok(quantify(&model, t1_ms, t1_err_ms)?)
}

/// Pretty JSON with a trailing newline, as written by every command.
pub fn render_json<T: Serialize>(value: &T) -> String {
    String::from_utf8(to_json(value)).expect("serde_json emits UTF-8")
}
