//! Single-exponential T1 extraction: `S(τ) = A·exp(−τ/T1) + C`.
//!
//! [`fit_exponential`] is a Levenberg–Marquardt iteration with an analytic
//! Jacobian. [`oracle_fit`] is an independent brute-force check: for every
//! T1 on a log grid the model is linear in `(A, C)`, so those are solved in
//! closed form and the grid minimum is returned.
//!
//! Delays are taken from the trace in seconds and fitted in ms.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::sequence::Trace;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpParams {
    pub amplitude: f64,
    pub offset: f64,
    pub t1_ms: f64,
}

impl ExpParams {
    pub fn eval(&self, tau_ms: f64) -> f64 {
        self.amplitude * (-tau_ms / self.t1_ms).exp() + self.offset
    }

    fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.amplitude, self.offset, self.t1_ms)
    }

    fn from_vector(v: &Vector3<f64>) -> Self {
        Self {
            amplitude: v[0],
            offset: v[1],
            t1_ms: v[2],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Converged when the scaled parameter step drops below this.
    pub step_tol: f64,
    /// Converged when an accepted step lowers the cost by less than this fraction.
    pub cost_tol: f64,
    pub t1_bounds_ms: (f64, f64),
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            step_tol: 1e-8,
            cost_tol: 1e-10,
            t1_bounds_ms: (1e-4, 1e4),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub amplitude: f64,
    pub offset: f64,
    pub t1_ms: f64,
    pub t1_err_ms: f64,
    /// Covariance of `(A, C, T1)`, T1 in ms.
    pub covariance: [[f64; 3]; 3],
    pub reduced_chi2: f64,
    /// Weighted sum of squared residuals at the optimum.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// T1 finished pinned at one of its bounds.
    pub bound_hit: bool,
    pub weighted: bool,
    pub n_points: usize,
}

impl FitResult {
    pub fn params(&self) -> ExpParams {
        ExpParams {
            amplitude: self.amplitude,
            offset: self.offset,
            t1_ms: self.t1_ms,
        }
    }
}

/// Delays (ms), signals, and weights of a trace.
struct Data {
    tau: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
    weighted: bool,
}

impl Data {
    fn from_trace(trace: &Trace) -> Self {
        let tau = trace.tau_ms();
        let y = trace.signals();
        let (w, weighted) = match trace.errors() {
            Some(e) => (e.iter().map(|e| 1.0 / (e * e)).collect(), true),
            None => (vec![1.0; y.len()], false),
        };
        Self { tau, y, w, weighted }
    }

    fn cost(&self, p: &ExpParams) -> f64 {
        self.tau
            .iter()
            .zip(&self.y)
            .zip(&self.w)
            .map(|((&t, &y), &w)| w * (y - p.eval(t)).powi(2))
            .sum()
    }
}

/// Model Jacobian `∂S/∂(A, C, T1)` at one delay.
pub fn model_gradient(p: &ExpParams, tau_ms: f64) -> [f64; 3] {
    let e = (-tau_ms / p.t1_ms).exp();
    [e, 1.0, p.amplitude * e * tau_ms / (p.t1_ms * p.t1_ms)]
}

/// Starting point from a log-linear regression.
///
/// `C` is the mean of the last 10 % of points and `A` the first signal minus
/// `C`. T1 comes from a line through `ln(S − C)` over points where `S − C`
/// clears three error bars (or is positive, without errors), weighted by
/// `(S − C)²` to undo the log transform's stretching of small values.
pub fn initial_guess(trace: &Trace) -> Result<ExpParams> {
    let n = trace.len();
    if n < 4 {
        return Err(Error::InsufficientData(format!("need at least 4 points, got {n}")));
    }
    let tau = trace.tau_ms();
    let y = trace.signals();
    let errs = trace.errors();
    let tail = (n / 10).max(1);
    let offset = y[n - tail..].iter().sum::<f64>() / tail as f64;
    let amplitude = y[0] - offset;
    let scale = y.iter().fold(0.0_f64, |m, v| m.max(v.abs()));

    let mut sw = 0.0;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut used = 0;
    let mut pts = Vec::with_capacity(n);
    for i in 0..n {
        let d = y[i] - offset;
        let floor = match &errs {
            Some(e) => 3.0 * e[i],
            None => 1e-12 * scale,
        };
        if d > floor && d > 0.0 {
            let w = d * d;
            let l = d.ln();
            sw += w;
            sx += w * tau[i];
            sy += w * l;
            pts.push((tau[i], l, w));
            used += 1;
        }
    }
    if used < 4 {
        return Err(Error::InsufficientData(format!(
            "only {used} points rise above the baseline; need 4"
        )));
    }
    let (mx, my) = (sx / sw, sy / sw);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(t, l, w) in &pts {
        sxx += w * (t - mx) * (t - mx);
        sxy += w * (t - mx) * (l - my);
    }
    let slope = sxy / sxx;
    if !(slope < 0.0 && slope.is_finite()) {
        return Err(Error::InsufficientData("signal does not decay above the baseline".into()));
    }
    Ok(ExpParams {
        amplitude,
        offset,
        t1_ms: -1.0 / slope,
    })
}

/// Weighted least-squares fit of `A·exp(−τ/T1) + C`.
///
/// Weights are `1/signal_err²` when every row has an error, otherwise all
/// ones. The covariance is `(JᵀWJ)⁻¹` scaled by the reduced χ². Running out
/// of iterations is not an error: the best point so far comes back with
/// `converged = false`.
pub fn fit_exponential(trace: &Trace, guess: Option<ExpParams>, options: &FitOptions) -> Result<FitResult> {
    let data = Data::from_trace(trace);
    let n = data.y.len();
    if n < 4 {
        return Err(Error::InsufficientData(format!("need at least 4 points, got {n}")));
    }
    let (lo, hi) = options.t1_bounds_ms;
    let mut p = match guess {
        Some(g) => g,
        None => initial_guess(trace)?,
    };
    p.t1_ms = p.t1_ms.clamp(lo, hi);
    let yscale = data.y.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let cost_floor = 1e-28 * data.y.iter().zip(&data.w).map(|(y, w)| w * y * y).sum::<f64>();

    let mut cost = data.cost(&p);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < options.max_iter {
        iterations += 1;
        if cost <= cost_floor {
            converged = true;
            break;
        }
        let (jtj, jtr) = normal_equations(&data, &p);
        let mut accepted = false;
        while lambda <= 1e16 {
            let mut damped = jtj;
            for k in 0..3 {
                damped[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = ExpParams::from_vector(&(p.to_vector() + step));
            trial.t1_ms = trial.t1_ms.clamp(lo, hi);
            let trial_cost = data.cost(&trial);
            if trial_cost < cost {
                let rel_step = ((trial.amplitude - p.amplitude).abs() / yscale)
                    .max((trial.offset - p.offset).abs() / yscale)
                    .max((trial.t1_ms - p.t1_ms).abs() / p.t1_ms);
                let rel_drop = (cost - trial_cost) / cost;
                p = trial;
                cost = trial_cost;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if rel_step < options.step_tol || rel_drop < options.cost_tol {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No descent direction at any damping: a minimum to machine precision.
            converged = true;
        }
        if converged {
            break;
        }
    }

    let dof = n as f64 - 3.0;
    let reduced_chi2 = if dof > 0.0 { cost / dof } else { f64::NAN };
    let (jtj, _) = normal_equations(&data, &p);
    let cov = jtj
        .try_inverse()
        .map(|inv| inv * reduced_chi2)
        .unwrap_or_else(|| Matrix3::from_element(f64::NAN));
    let t1_err = cov[(2, 2)].max(0.0).sqrt();
    let bound_hit = p.t1_ms <= lo || p.t1_ms >= hi;
    let mut covariance = [[0.0; 3]; 3];
    for (i, row) in covariance.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            *c = 0.5 * (cov[(i, j)] + cov[(j, i)]);
        }
    }
    Ok(FitResult {
        amplitude: p.amplitude,
        offset: p.offset,
        t1_ms: p.t1_ms,
        t1_err_ms: t1_err,
        covariance,
        reduced_chi2,
        cost,
        iterations,
        converged,
        bound_hit,
        weighted: data.weighted,
        n_points: n,
    })
}

/// `JᵀWJ` and `JᵀW(y − f)` for the model gradient.
fn normal_equations(data: &Data, p: &ExpParams) -> (Matrix3<f64>, Vector3<f64>) {
    let mut jtj = Matrix3::zeros();
    let mut jtr = Vector3::zeros();
    for ((&t, &y), &w) in data.tau.iter().zip(&data.y).zip(&data.w) {
        let g = Vector3::from(model_gradient(p, t));
        let r = y - p.eval(t);
        jtj += w * g * g.transpose();
        jtr += w * r * g;
    }
    (jtj, jtr)
}

/// T1 grid for [`oracle_fit`].
#[derive(Clone, Debug, PartialEq)]
pub enum OracleGrid {
    /// `n` log-spaced values over `[0.1·τ_min, 10·τ_max]` of the trace.
    Auto { n: usize },
    Explicit(Vec<f64>),
}

impl Default for OracleGrid {
    fn default() -> Self {
        OracleGrid::Auto { n: 400 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleFit {
    pub params: ExpParams,
    pub cost: f64,
    /// Ratio between neighbouring grid values (1 for a single-point grid).
    pub grid_ratio: f64,
}

/// Variable-projection brute force: best `(A, C)` in closed form at every grid T1.
pub fn oracle_fit(trace: &Trace, grid: &OracleGrid) -> Result<OracleFit> {
    let data = Data::from_trace(trace);
    let values = match grid {
        OracleGrid::Explicit(v) => v.clone(),
        OracleGrid::Auto { n } => {
            let n = (*n).max(200);
            let positive: Vec<f64> = data.tau.iter().copied().filter(|&t| t > 0.0).collect();
            let (Some(&min), Some(&max)) = (positive.first(), positive.last()) else {
                return Err(Error::InsufficientData("trace has no positive delays".into()));
            };
            let (lo, hi) = ((0.1 * min).ln(), (10.0 * max).ln());
            (0..n)
                .map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64).exp())
                .collect()
        }
    };
    if values.is_empty() {
        return Err(Error::InsufficientData("empty oracle grid".into()));
    }
    let grid_ratio = if values.len() > 1 {
        values
            .windows(2)
            .map(|w| (w[1] / w[0]).max(w[0] / w[1]))
            .fold(1.0, f64::max)
    } else {
        1.0
    };
    let mut best: Option<(ExpParams, f64)> = None;
    for &t1 in &values {
        let Some((amplitude, offset)) = linear_subproblem(&data, t1) else {
            continue;
        };
        let p = ExpParams {
            amplitude,
            offset,
            t1_ms: t1,
        };
        let c = data.cost(&p);
        if best.is_none_or(|(_, bc)| c < bc) {
            best = Some((p, c));
        }
    }
    let (params, cost) = best.ok_or_else(|| Error::InsufficientData("no grid point gave a solvable subproblem".into()))?;
    Ok(OracleFit {
        params,
        cost,
        grid_ratio,
    })
}

/// Weighted least squares for `y ≈ A·e + C` with `e = exp(−τ/t1)` fixed.
fn linear_subproblem(data: &Data, t1: f64) -> Option<(f64, f64)> {
    let (mut sw, mut se, mut sy, mut see, mut sey) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((&t, &y), &w) in data.tau.iter().zip(&data.y).zip(&data.w) {
        let e = (-t / t1).exp();
        sw += w;
        se += w * e;
        sy += w * y;
        see += w * e * e;
        sey += w * e * y;
    }
    let det = sw * see - se * se;
    if !(det.abs() > 1e-14 * sw * see) {
        return None;
    }
    let a = (sw * sey - se * sy) / det;
    let c = (see * sy - se * sey) / det;
    Some((a, c))
}

/// Largest fraction of failed resample fits tolerated by [`bootstrap_t1_err`].
pub const BOOTSTRAP_MAX_FAILURE: f64 = 0.2;

/// Residual-resampling bootstrap standard deviation of T1 (ms).
///
/// Residuals are standardized by the row errors (when present), resampled
/// with replacement, and rescaled onto each row, so heteroscedastic traces
/// keep their error profile. Resample `k` draws from a seed derived from
/// `(rng_seed, k)`.
pub fn bootstrap_t1_err(trace: &Trace, fit: &FitResult, n_resamples: usize, rng_seed: u64) -> Result<f64> {
    if !fit.converged {
        return Err(Error::InsufficientData("bootstrap needs a converged fit".into()));
    }
    if n_resamples < 2 {
        return Err(Error::InsufficientData("bootstrap needs at least 2 resamples".into()));
    }
    let data = Data::from_trace(trace);
    let p = fit.params();
    let sigma: Vec<f64> = data.w.iter().map(|w| 1.0 / w.sqrt()).collect();
    let fitted: Vec<f64> = data.tau.iter().map(|&t| p.eval(t)).collect();
    let standardized: Vec<f64> = data
        .y
        .iter()
        .zip(&fitted)
        .zip(&sigma)
        .map(|((y, f), s)| (y - f) / s)
        .collect();
    let n = standardized.len();
    let options = FitOptions::default();

    let outcomes: Vec<Option<f64>> = (0..n_resamples)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng_for(rng_seed, k as u64);
            let signals: Vec<f64> = (0..n)
                .map(|i| (fitted[i] + sigma[i] * standardized[rng.random_range(0..n)]).clamp(-1.0, 1.0))
                .collect();
            let resampled = trace.with_signals(&signals).ok()?;
            let refit = fit_exponential(&resampled, Some(p), &options).ok()?;
            (refit.converged && !refit.bound_hit).then_some(refit.t1_ms)
        })
        .collect();
    let t1s: Vec<f64> = outcomes.iter().flatten().copied().collect();
    let failed = n_resamples - t1s.len();
    if failed as f64 > BOOTSTRAP_MAX_FAILURE * n_resamples as f64 || t1s.len() < 2 {
        return Err(Error::BootstrapUnstable {
            failed,
            total: n_resamples,
        });
    }
    let mean = t1s.iter().sum::<f64>() / t1s.len() as f64;
    let var = t1s.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (t1s.len() - 1) as f64;
    Ok(var.sqrt())
}
