//! Linear T1 calibration, detection limit, and inverse prediction.

use serde::{Deserialize, Serialize};

use crate::error::{domain, ensure_positive, Error, Result};
use crate::noise::AmountUnit;

/// Default single-measurement T1 error used as the floor on `sigma_t1`, ms.
pub const DEFAULT_SIGMA_FLOOR_MS: f64 = 0.1;

/// Two-sided normal quantile for the 95 % interval reported by [`quantify`].
pub const CI_Z: f64 = 1.959_963_984_540_054;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub amount: f64,
    pub unit: AmountUnit,
    pub t1_ms: f64,
    pub t1_err_ms: Option<f64>,
    pub location_id: Option<String>,
}

impl CalibrationPoint {
    pub fn new(amount: f64, unit: AmountUnit, t1_ms: f64) -> Self {
        Self {
            amount,
            unit,
            t1_ms,
            t1_err_ms: None,
            location_id: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amount.is_finite() && self.amount >= 0.0) {
            return Err(domain("amount", format!("expected >= 0, got {}", self.amount)));
        }
        ensure_positive("t1_ms", self.t1_ms)?;
        if let Some(e) = self.t1_err_ms {
            if !(e.is_finite() && e >= 0.0) {
                return Err(domain("t1_err_ms", format!("expected >= 0, got {e}")));
            }
        }
        Ok(())
    }
}

/// Mean T1 at one amount.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub amount: f64,
    pub mean_t1_ms: f64,
    /// Standard error of the mean; `None` for a single point without its own error.
    pub sem_ms: Option<f64>,
    pub n: usize,
    /// Set when the SEM could not be estimated from replicates.
    pub sem_flagged: bool,
}

/// Groups points by exact amount (ascending) and reports mean and SEM per group.
///
/// A group of one takes its own `t1_err_ms` as SEM and is flagged.
pub fn average_replicates(points: &[CalibrationPoint]) -> Vec<ReplicateSummary> {
    let mut sorted: Vec<&CalibrationPoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.amount.total_cmp(&b.amount));
    sorted
        .chunk_by(|a, b| a.amount == b.amount)
        .map(|group| {
            let n = group.len();
            let mean = group.iter().map(|p| p.t1_ms).sum::<f64>() / n as f64;
            if n == 1 {
                ReplicateSummary {
                    amount: group[0].amount,
                    mean_t1_ms: mean,
                    sem_ms: group[0].t1_err_ms,
                    n,
                    sem_flagged: true,
                }
            } else {
                let var = group.iter().map(|p| (p.t1_ms - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                ReplicateSummary {
                    amount: group[0].amount,
                    mean_t1_ms: mean,
                    sem_ms: Some((var / n as f64).sqrt()),
                    n,
                    sem_flagged: false,
                }
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationOptions {
    /// Multiplier on `sigma_t1` in the detection limit.
    pub k_factor: f64,
    /// Lower bound on `sigma_t1`, ms.
    pub sigma_floor_ms: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            k_factor: 1.0,
            sigma_floor_ms: DEFAULT_SIGMA_FLOOR_MS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub unit: AmountUnit,
    /// ms per unit amount.
    pub slope: f64,
    pub intercept: f64,
    pub slope_err: f64,
    pub intercept_err: f64,
    /// Single-measurement T1 error used for the detection limit, ms.
    pub sigma_t1: f64,
    /// RMS of individual-point residuals about the line, ms.
    pub residual_rms: f64,
    pub lod: f64,
    pub k_factor: f64,
    pub n_points: usize,
    pub n_amounts: usize,
    /// Fitted on replicate means weighted by 1/SEM².
    pub weighted: bool,
    /// T1 does not fall with amount; the model is returned but suspect.
    pub direction_warning: bool,
}

impl CalibrationModel {
    pub fn predict_t1(&self, amount: f64) -> f64 {
        self.intercept + self.slope * amount
    }
}

/// Linear least squares of T1 on amount.
///
/// Replicates are averaged first. When every amount has an SEM (from
/// replicates or a single point's own error) the means are weighted by
/// `1/SEM²` and the parameter covariance is scaled by the reduced χ²;
/// otherwise the individual points enter an ordinary unweighted fit.
/// `sigma_t1 = max(residual RMS, sigma_floor_ms)`.
pub fn fit_calibration(points: &[CalibrationPoint], options: &CalibrationOptions) -> Result<CalibrationModel> {
    let Some(first) = points.first() else {
        return Err(Error::InsufficientData("calibration needs at least 3 distinct amounts, got none".into()));
    };
    let unit = first.unit;
    for p in points {
        p.validate()?;
        if p.unit != unit {
            return Err(Error::UnitMismatch {
                expected: unit.to_string(),
                found: p.unit.to_string(),
            });
        }
    }
    ensure_positive("k_factor", options.k_factor)?;
    if !(options.sigma_floor_ms.is_finite() && options.sigma_floor_ms >= 0.0) {
        return Err(domain("sigma_floor_ms", format!("expected >= 0, got {}", options.sigma_floor_ms)));
    }
    let groups = average_replicates(points);
    if groups.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "calibration needs at least 3 distinct amounts, got {}",
            groups.len()
        )));
    }

    let sems: Option<Vec<f64>> = groups.iter().map(|g| g.sem_ms.filter(|&s| s > 0.0)).collect();
    let (xs, ys, ws, weighted): (Vec<f64>, Vec<f64>, Vec<f64>, bool) = match sems {
        Some(s) => (
            groups.iter().map(|g| g.amount).collect(),
            groups.iter().map(|g| g.mean_t1_ms).collect(),
            s.iter().map(|s| 1.0 / (s * s)).collect(),
            true,
        ),
        None => (
            points.iter().map(|p| p.amount).collect(),
            points.iter().map(|p| p.t1_ms).collect(),
            vec![1.0; points.len()],
            false,
        ),
    };
    let line = weighted_line(&xs, &ys, &ws);

    let residual_rms =
        (points.iter().map(|p| (p.t1_ms - line.predict(p.amount)).powi(2)).sum::<f64>() / points.len() as f64).sqrt();
    let sigma_t1 = residual_rms.max(options.sigma_floor_ms);
    if !(sigma_t1 > 0.0) {
        return Err(domain(
            "sigma_floor_ms",
            "residuals are zero and no floor was given; sigma_t1 would be 0",
        ));
    }
    let mut model = CalibrationModel {
        unit,
        slope: line.slope,
        intercept: line.intercept,
        slope_err: line.slope_err,
        intercept_err: line.intercept_err,
        sigma_t1,
        residual_rms,
        lod: f64::NAN,
        k_factor: options.k_factor,
        n_points: points.len(),
        n_amounts: groups.len(),
        weighted,
        direction_warning: !(line.slope < 0.0),
    };
    model.lod = detection_limit(&model, sigma_t1, options.k_factor)?;
    Ok(model)
}

struct Line {
    slope: f64,
    intercept: f64,
    slope_err: f64,
    intercept_err: f64,
}

impl Line {
    fn predict(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

fn weighted_line(xs: &[f64], ys: &[f64], ws: &[f64]) -> Line {
    let sw: f64 = ws.iter().sum();
    let xbar = xs.iter().zip(ws).map(|(x, w)| w * x).sum::<f64>() / sw;
    let ybar = ys.iter().zip(ws).map(|(y, w)| w * y).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for ((&x, &y), &w) in xs.iter().zip(ys).zip(ws) {
        sxx += w * (x - xbar) * (x - xbar);
        sxy += w * (x - xbar) * (y - ybar);
    }
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let dof = xs.len() as f64 - 2.0;
    let ssr: f64 = xs
        .iter()
        .zip(ys)
        .zip(ws)
        .map(|((&x, &y), &w)| w * (y - intercept - slope * x).powi(2))
        .sum();
    let s2 = ssr / dof;
    Line {
        slope,
        intercept,
        slope_err: (s2 / sxx).sqrt(),
        intercept_err: (s2 * (1.0 / sw + xbar * xbar / sxx)).sqrt(),
    }
}

/// `k · sigma_t1 / |slope|`, in the model's amount unit.
pub fn detection_limit(model: &CalibrationModel, sigma_t1: f64, k: f64) -> Result<f64> {
    ensure_positive("sigma_t1", sigma_t1)?;
    ensure_positive("k", k)?;
    if model.slope == 0.0 || !model.slope.is_finite() {
        return Err(Error::UndefinedLod);
    }
    Ok(k * (sigma_t1 / model.slope.abs()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantification {
    pub amount: f64,
    pub unit: AmountUnit,
    /// Unclamped inverse prediction.
    pub raw_amount: f64,
    pub amount_err: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_level: f64,
    /// The measured T1 lies above the zero-amount intercept; amount clamped to 0.
    pub below_baseline: bool,
    pub below_lod: bool,
    pub lod: f64,
    pub k_factor: f64,
}

/// Inverse prediction of amount from a measured T1, with a 95 % interval
/// propagated to first order from `t1_err_ms`, `slope_err` and `intercept_err`.
pub fn quantify(model: &CalibrationModel, t1_measured_ms: f64, t1_err_ms: f64) -> Result<Quantification> {
    ensure_positive("t1_ms", t1_measured_ms)?;
    if !(t1_err_ms.is_finite() && t1_err_ms >= 0.0) {
        return Err(domain("t1_err_ms", format!("expected >= 0, got {t1_err_ms}")));
    }
    if model.slope == 0.0 || !model.slope.is_finite() {
        return Err(Error::UndefinedLod);
    }
    let raw = (t1_measured_ms - model.intercept) / model.slope;
    let var = (t1_err_ms.powi(2) + model.intercept_err.powi(2) + (raw * model.slope_err).powi(2)) / model.slope.powi(2);
    let amount_err = var.sqrt();
    let below_baseline = raw < 0.0;
    let amount = raw.max(0.0);
    Ok(Quantification {
        amount,
        unit: model.unit,
        raw_amount: raw,
        amount_err,
        ci_low: (raw - CI_Z * amount_err).max(0.0),
        ci_high: (raw + CI_Z * amount_err).max(0.0),
        ci_level: 0.95,
        below_baseline,
        below_lod: amount < model.lod,
        lod: model.lod,
        k_factor: model.k_factor,
    })
}
