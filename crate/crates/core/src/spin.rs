//! Five-level rate-equation model of the NV center.
//!
//! Levels are ordered `g0, g1, e0, e1, s`: the ground triplet split into
//! `m_s = 0` and the lumped `m_s = ±1` pair, the matching excited-state
//! levels, and the metastable singlet. Between events the populations obey
//! `dp/dt = M·p` with a piecewise-constant generator `M`, which is solved
//! exactly with a matrix exponential. The system is stiff (optical rates near
//! 1e8/s, spin relaxation near 1e3/s), so no time stepping is involved.

use nalgebra::{Matrix5, Matrix6, Vector5, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{domain, ensure_fraction, ensure_nonneg, Error, Result};

/// Number of levels in the lumped model.
pub const N_LEVELS: usize = 5;

/// Largest admissible `duration · max|rate|` passed to the matrix exponential.
pub const MAX_EXPONENT: f64 = 1e12;

/// Tolerance on probability conservation (column sums, population sums).
pub const CONSERVATION_TOL: f64 = 1e-10;

/// Most negative population accepted (and clamped to zero) after propagation.
pub const NEGATIVITY_TOL: f64 = 1e-12;

/// Name of the photophysics preset used when a config does not name one.
pub const DEFAULT_PRESET: &str = "nv_ensemble_rt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Level {
    G0 = 0,
    G1 = 1,
    E0 = 2,
    E1 = 3,
    Singlet = 4,
}

impl Level {
    pub const ALL: [Level; N_LEVELS] = [Level::G0, Level::G1, Level::E0, Level::E1, Level::Singlet];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Optical and spin transition rates of the NV level system. Rates are in 1/s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhotophysicsParams {
    /// Ground → excited pumping while the laser is on (spin conserving).
    pub pump_rate: f64,
    /// Excited → ground radiative decay (spin conserving).
    pub radiative_rate: f64,
    /// Intersystem crossing out of the excited `m_s = 0` level.
    pub isc_rate_ms0: f64,
    /// Intersystem crossing out of the excited `m_s = ±1` levels.
    pub isc_rate_ms1: f64,
    pub singlet_decay_rate: f64,
    /// Fraction of singlet decays that land in `g0`; the rest go to `g1`.
    pub singlet_branch_to_ms0: f64,
    /// Equilibrium share of `g0` within the ground manifold.
    pub thermal_ms0_population: f64,
    /// Ground-state zero-field splitting. Informational; no dynamics use it.
    pub zfs_ghz: f64,
}

impl Default for PhotophysicsParams {
    fn default() -> Self {
        Self::nv_ensemble_rt()
    }
}

impl PhotophysicsParams {
    /// Names accepted by [`PhotophysicsParams::preset`].
    pub const PRESETS: [&'static str; 2] = [DEFAULT_PRESET, "nv_ensemble_rt_sublevel_eq"];

    /// Room-temperature ensemble rates of typical literature magnitude
    /// (~14 ns excited lifetime, strong `±1` intersystem crossing, ~300 ns
    /// singlet). Tuned so the optically pumped ground polarization sits near
    /// 96 %. Thermal equilibrium splits the ground population evenly between
    /// `g0` and the lumped `±1` level.
    pub fn nv_ensemble_rt() -> Self {
        Self {
            pump_rate: 5.0e6,
            radiative_rate: 6.5e7,
            isc_rate_ms0: 7.0e6,
            isc_rate_ms1: 8.0e7,
            singlet_decay_rate: 3.3e6,
            singlet_branch_to_ms0: 0.8,
            thermal_ms0_population: 0.5,
            zfs_ghz: 2.87,
        }
    }

    /// Same rates as [`Self::nv_ensemble_rt`] but with thermal equilibrium
    /// uniform over the three ground sublevels, i.e. `(1/3, 2/3)` in lumped
    /// coordinates.
    pub fn nv_ensemble_rt_sublevel_eq() -> Self {
        Self {
            thermal_ms0_population: 1.0 / 3.0,
            ..Self::nv_ensemble_rt()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "nv_ensemble_rt" => Some(Self::nv_ensemble_rt()),
            "nv_ensemble_rt_sublevel_eq" => Some(Self::nv_ensemble_rt_sublevel_eq()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_nonneg("pump_rate", self.pump_rate)?;
        ensure_nonneg("radiative_rate", self.radiative_rate)?;
        ensure_nonneg("isc_rate_ms0", self.isc_rate_ms0)?;
        ensure_nonneg("isc_rate_ms1", self.isc_rate_ms1)?;
        ensure_nonneg("singlet_decay_rate", self.singlet_decay_rate)?;
        ensure_fraction("singlet_branch_to_ms0", self.singlet_branch_to_ms0)?;
        if !(self.thermal_ms0_population > 0.0 && self.thermal_ms0_population < 1.0) {
            return Err(domain(
                "thermal_ms0_population",
                format!("expected a value in (0, 1), got {}", self.thermal_ms0_population),
            ));
        }
        if self.isc_rate_ms1 <= self.isc_rate_ms0 {
            return Err(domain(
                "isc_rate_ms1",
                format!(
                    "must exceed isc_rate_ms0 ({} <= {})",
                    self.isc_rate_ms1, self.isc_rate_ms0
                ),
            ));
        }
        Ok(())
    }
}

/// Occupation probabilities over `g0, g1, e0, e1, s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PopulationState(Vector5<f64>);

impl PopulationState {
    pub fn new(p: [f64; N_LEVELS]) -> Result<Self> {
        let state = Self(Vector5::from(p));
        state.check()?;
        Ok(state)
    }

    /// A state with all population in the ground manifold.
    pub fn ground(p_g0: f64, p_g1: f64) -> Result<Self> {
        Self::new([p_g0, p_g1, 0.0, 0.0, 0.0])
    }

    pub fn thermal(params: &PhotophysicsParams) -> Self {
        let pi0 = params.thermal_ms0_population;
        Self(Vector5::new(pi0, 1.0 - pi0, 0.0, 0.0, 0.0))
    }

    fn check(&self) -> Result<()> {
        if self.0.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(domain("population", format!("entries must lie in [0, 1]: {:?}", self.as_array())));
        }
        let sum = self.0.sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(domain("population", format!("entries must sum to 1, sum = {sum}")));
        }
        Ok(())
    }

    pub fn get(&self, level: Level) -> f64 {
        self.0[level.index()]
    }

    pub fn as_array(&self) -> [f64; N_LEVELS] {
        self.0.into()
    }

    pub fn as_vector(&self) -> &Vector5<f64> {
        &self.0
    }

    pub fn ground_total(&self) -> f64 {
        self.0[0] + self.0[1]
    }

    /// `p_g0 / (p_g0 + p_g1)`.
    pub fn ground_polarization(&self) -> f64 {
        self.0[0] / self.ground_total()
    }
}

/// Generator of the population ODE. Column `j` holds the outflow of level `j`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateMatrix(Matrix5<f64>);

impl RateMatrix {
    /// Wraps an arbitrary generator after checking conservation and
    /// nonnegative off-diagonal rates.
    pub fn from_matrix(m: Matrix5<f64>) -> Result<Self> {
        for j in 0..N_LEVELS {
            let col = m.column(j);
            let scale = col.iter().fold(1.0_f64, |acc, x| acc.max(x.abs()));
            if (col.sum() / scale).abs() > 1e-12 {
                return Err(domain("rate_matrix", format!("column {j} does not sum to zero")));
            }
            for i in 0..N_LEVELS {
                if i != j && !(m[(i, j)] >= 0.0) {
                    return Err(domain("rate_matrix", format!("negative rate at ({i}, {j})")));
                }
            }
        }
        Ok(Self(m))
    }

    pub fn as_matrix(&self) -> &Matrix5<f64> {
        &self.0
    }

    pub fn max_rate(&self) -> f64 {
        self.0.iter().fold(0.0, |acc: f64, x| acc.max(x.abs()))
    }

    pub fn apply(&self, state: &PopulationState) -> Vector5<f64> {
        self.0 * state.0
    }
}

struct Builder(Matrix5<f64>);

impl Builder {
    fn transfer(&mut self, from: Level, to: Level, rate: f64) {
        let (i, j) = (to.index(), from.index());
        self.0[(i, j)] += rate;
        self.0[(j, j)] -= rate;
    }
}

/// Builds the generator for one piecewise-constant interval.
///
/// `gamma1` (1/s) mixes the ground manifold toward thermal equilibrium
/// `π = (π0, 1 − π0)`: `dp_g/dt ∋ −γ1·(p_g − π·(p_g0 + p_g1))`. Every ground
/// population difference therefore decays at exactly `gamma1`.
pub fn build_rate_matrix(params: &PhotophysicsParams, laser_on: bool, gamma1: f64) -> Result<RateMatrix> {
    params.validate()?;
    ensure_nonneg("gamma1", gamma1)?;
    use Level::*;
    let mut b = Builder(Matrix5::zeros());
    if laser_on {
        b.transfer(G0, E0, params.pump_rate);
        b.transfer(G1, E1, params.pump_rate);
    }
    b.transfer(E0, G0, params.radiative_rate);
    b.transfer(E1, G1, params.radiative_rate);
    b.transfer(E0, Singlet, params.isc_rate_ms0);
    b.transfer(E1, Singlet, params.isc_rate_ms1);
    b.transfer(Singlet, G0, params.singlet_decay_rate * params.singlet_branch_to_ms0);
    b.transfer(Singlet, G1, params.singlet_decay_rate * (1.0 - params.singlet_branch_to_ms0));
    let pi0 = params.thermal_ms0_population;
    b.transfer(G0, G1, gamma1 * (1.0 - pi0));
    b.transfer(G1, G0, gamma1 * pi0);
    Ok(RateMatrix(b.0))
}

fn check_exponent(m: &RateMatrix, duration: f64) -> Result<()> {
    ensure_nonneg("duration", duration)?;
    let exponent = duration * m.max_rate();
    if exponent > MAX_EXPONENT {
        return Err(Error::Overflow {
            exponent,
            cap: MAX_EXPONENT,
        });
    }
    Ok(())
}

fn finish(p: Vector5<f64>) -> Result<PopulationState> {
    if p.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite population after propagation".into()));
    }
    let sum = p.sum();
    if (sum - 1.0).abs() > CONSERVATION_TOL {
        return Err(Error::Numeric(format!("population sum drifted to {sum}")));
    }
    if let Some(x) = p.iter().find(|&&x| x < -NEGATIVITY_TOL) {
        return Err(Error::Numeric(format!("negative population {x:e} after propagation")));
    }
    Ok(PopulationState(p.map(|x| x.clamp(0.0, 1.0))))
}

/// Exact solution `exp(M·duration)·p` of the piecewise-constant ODE.
pub fn propagate(state: &PopulationState, m: &RateMatrix, duration: f64) -> Result<PopulationState> {
    check_exponent(m, duration)?;
    if duration == 0.0 {
        return Ok(*state);
    }
    finish(transition_matrix(m, duration) * state.0)
}

/// `exp(M·t)` by scaling and squaring. The scaled exponential comes from a
/// Padé approximant; during squaring every column is renormalized to sum to
/// one, which stops the `(1 + ε)^(2^s)` drift of column sums on long, stiff
/// intervals.
pub fn transition_matrix(m: &RateMatrix, duration: f64) -> Matrix5<f64> {
    let norm = m.0.column_iter().map(|c| c.abs().sum()).fold(0.0, f64::max) * duration;
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let mut e = (m.0 * (duration / 2f64.powi(squarings))).exp();
    normalize_columns(&mut e);
    for _ in 0..squarings {
        e = e * e;
        normalize_columns(&mut e);
    }
    e
}

fn normalize_columns(e: &mut Matrix5<f64>) {
    for mut col in e.column_iter_mut() {
        col.apply(|x| *x = x.max(0.0));
        let s = col.sum();
        col /= s;
    }
}

/// Propagates while accumulating emitted photons, `∫ radiative_rate·(p_e0 + p_e1) dt`.
///
/// The integral rides along as a sixth component of an augmented generator,
/// so it is exact to the same precision as the propagation itself.
pub fn propagate_with_fluorescence(
    state: &PopulationState,
    m: &RateMatrix,
    params: &PhotophysicsParams,
    duration: f64,
) -> Result<(PopulationState, f64)> {
    check_exponent(m, duration)?;
    if duration == 0.0 {
        return Ok((*state, 0.0));
    }
    let mut aug = Matrix6::zeros();
    aug.fixed_view_mut::<5, 5>(0, 0).copy_from(&m.0);
    aug[(5, Level::E0.index())] = params.radiative_rate;
    aug[(5, Level::E1.index())] = params.radiative_rate;
    let mut v = Vector6::zeros();
    v.fixed_rows_mut::<5>(0).copy_from(&state.0);
    let out = (aug * duration).exp() * v;
    let photons = out[5];
    if !(photons.is_finite() && photons >= -NEGATIVITY_TOL) {
        return Err(Error::Numeric(format!("invalid fluorescence integral {photons}")));
    }
    Ok((finish(out.fixed_rows::<5>(0).into_owned())?, photons.max(0.0)))
}

/// Instantaneous microwave π pulse exchanging `g0` and `g1` with the given fidelity.
pub fn apply_pi_pulse(state: &PopulationState, fidelity: f64) -> Result<PopulationState> {
    ensure_fraction("fidelity", fidelity)?;
    let mut p = state.0;
    let (g0, g1) = (p[0], p[1]);
    p[0] = (1.0 - fidelity) * g0 + fidelity * g1;
    p[1] = (1.0 - fidelity) * g1 + fidelity * g0;
    Ok(PopulationState(p))
}

/// Normalized kernel vector of `M`.
///
/// Uniqueness is checked through the singular values: exactly one may fall
/// below `1e-12·σ_max`. The kernel itself is obtained by replacing one
/// balance equation with the normalization constraint.
pub fn steady_state(m: &RateMatrix) -> Result<PopulationState> {
    let svd = m.0.svd(false, false);
    let sigma_max = svd.singular_values.max();
    if sigma_max == 0.0 {
        return Err(Error::Degenerate("zero generator: every state is stationary".into()));
    }
    let null_count = svd
        .singular_values
        .iter()
        .filter(|&&s| s <= 1e-12 * sigma_max)
        .count();
    if null_count != 1 {
        return Err(Error::Degenerate(format!("kernel dimension is {null_count}, expected 1")));
    }
    let mut a = m.0;
    a.row_mut(N_LEVELS - 1).fill(1.0);
    let mut rhs = Vector5::zeros();
    rhs[N_LEVELS - 1] = 1.0;
    let p = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Degenerate("normalized balance equations are singular".into()))?;
    if let Some(x) = p.iter().find(|&&x| x < -1e-9) {
        return Err(Error::Degenerate(format!("kernel vector has negative entry {x:e}")));
    }
    let p = p.map(|x| x.max(0.0));
    Ok(PopulationState(p / p.sum()))
}

/// Photon emission rate (1/s); singlet emission is filtered and does not count.
pub fn fluorescence_rate(state: &PopulationState, params: &PhotophysicsParams) -> f64 {
    params.radiative_rate * (state.get(Level::E0) + state.get(Level::E1))
}

/// Long-time limit of a laser-off interval with no ground-state relaxation:
/// excited and singlet populations drain into the ground manifold by their
/// branching ratios. Levels with no outgoing rate keep their population.
pub fn relax_to_ground(state: &PopulationState, params: &PhotophysicsParams) -> PopulationState {
    let [g0, g1, e0, e1, s] = state.as_array();
    let split = |keep: f64, leak: f64| {
        let total = keep + leak;
        if total > 0.0 {
            (keep / total, leak / total)
        } else {
            (0.0, 0.0)
        }
    };
    let (r0, x0) = split(params.radiative_rate, params.isc_rate_ms0);
    let (r1, x1) = split(params.radiative_rate, params.isc_rate_ms1);
    let stuck_e0 = if r0 + x0 == 0.0 { e0 } else { 0.0 };
    let stuck_e1 = if r1 + x1 == 0.0 { e1 } else { 0.0 };
    let singlet = s + e0 * x0 + e1 * x1;
    let (to_g0, to_g1, stuck_s) = if params.singlet_decay_rate > 0.0 {
        let b = params.singlet_branch_to_ms0;
        (b * singlet, (1.0 - b) * singlet, 0.0)
    } else {
        (0.0, 0.0, singlet)
    };
    let p = Vector5::new(g0 + e0 * r0 + to_g0, g1 + e1 * r1 + to_g1, stuck_e0, stuck_e1, stuck_s);
    PopulationState(p / p.sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn sublevel_eq() -> PhotophysicsParams {
        PhotophysicsParams::nv_ensemble_rt_sublevel_eq()
    }

    #[test]
    fn rejects_invalid_params() {
        let mut p = PhotophysicsParams::default();
        p.isc_rate_ms1 = p.isc_rate_ms0;
        assert!(matches!(build_rate_matrix(&p, true, 0.0), Err(Error::ParameterDomain { .. })));
        let p = PhotophysicsParams {
            singlet_branch_to_ms0: 1.2,
            ..PhotophysicsParams::default()
        };
        assert!(build_rate_matrix(&p, true, 0.0).is_err());
        let p = PhotophysicsParams {
            pump_rate: -1.0,
            ..PhotophysicsParams::default()
        };
        assert!(build_rate_matrix(&p, true, 0.0).is_err());
        assert!(build_rate_matrix(&PhotophysicsParams::default(), true, -1.0).is_err());
    }

    #[test]
    fn ground_block_vanishes_without_drive_or_relaxation() {
        let m = build_rate_matrix(&PhotophysicsParams::default(), false, 0.0).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(m.as_matrix()[(i, j)], 0.0);
            }
        }
        let p = PopulationState::ground(0.7, 0.3).unwrap();
        assert_eq!(m.apply(&p), Vector5::zeros());
        assert_eq!(propagate(&p, &m, 1e-3).unwrap(), p);
    }

    #[test]
    fn mixing_rate_at_t0() {
        let m = build_rate_matrix(&sublevel_eq(), false, 1000.0).unwrap();
        let p = PopulationState::ground(1.0, 0.0).unwrap();
        assert_abs_diff_eq!(m.apply(&p)[0], -1000.0 * (1.0 - 1.0 / 3.0), epsilon = 1e-9);
    }

    #[test]
    fn propagate_zero_duration_is_identity() {
        let m = build_rate_matrix(&PhotophysicsParams::default(), true, 350.0).unwrap();
        let p = PopulationState::new([0.2, 0.3, 0.1, 0.1, 0.3]).unwrap();
        assert_eq!(propagate(&p, &m, 0.0).unwrap(), p);
        assert!(propagate(&p, &m, -1.0).is_err());
    }

    #[test]
    fn propagate_matches_closed_form_mixing() {
        let t1 = 2.856e-3;
        let m = build_rate_matrix(&sublevel_eq(), false, 1.0 / t1).unwrap();
        let p = PopulationState::ground(0.9, 0.1).unwrap();
        let out = propagate(&p, &m, t1).unwrap();
        let expected = 1.0 / 3.0 + (0.9 - 1.0 / 3.0) * (-1.0_f64).exp();
        assert_abs_diff_eq!(out.get(Level::G0), expected, epsilon = 1e-10);
        assert_abs_diff_eq!(out.get(Level::G0), 0.541798, epsilon = 1e-6);
    }

    #[test]
    fn overflow_guard() {
        let m = build_rate_matrix(&PhotophysicsParams::default(), true, 0.0).unwrap();
        let p = PopulationState::ground(1.0, 0.0).unwrap();
        assert!(matches!(propagate(&p, &m, 1e6), Err(Error::Overflow { .. })));
    }

    #[test]
    fn pi_pulse_examples() {
        let p = PopulationState::ground(0.9, 0.1).unwrap();
        let swapped = apply_pi_pulse(&p, 1.0).unwrap();
        assert_abs_diff_eq!(swapped.get(Level::G0), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(swapped.get(Level::G1), 0.9, epsilon = 1e-15);
        assert_eq!(apply_pi_pulse(&p, 0.0).unwrap(), p);
        assert_abs_diff_eq!(apply_pi_pulse(&p, 0.8).unwrap().get(Level::G0), 0.26, epsilon = 1e-15);
        assert!(apply_pi_pulse(&p, 1.01).is_err());
        assert!(apply_pi_pulse(&p, -0.1).is_err());
        let mixed = PopulationState::new([0.5, 0.2, 0.1, 0.05, 0.15]).unwrap();
        let out = apply_pi_pulse(&mixed, 1.0).unwrap();
        assert_eq!(out.as_array()[2..], mixed.as_array()[2..]);
    }

    #[test]
    fn laser_off_steady_state_is_thermal() {
        for params in [sublevel_eq(), PhotophysicsParams::default()] {
            let m = build_rate_matrix(&params, false, 350.0).unwrap();
            let ss = steady_state(&m).unwrap();
            let pi0 = params.thermal_ms0_population;
            let expected = [pi0, 1.0 - pi0, 0.0, 0.0, 0.0];
            for (a, b) in ss.as_array().iter().zip(expected) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn steady_state_detects_degeneracy() {
        let m = build_rate_matrix(&PhotophysicsParams::default(), false, 0.0).unwrap();
        assert!(matches!(steady_state(&m), Err(Error::Degenerate(_))));
        let zero = RateMatrix::from_matrix(Matrix5::zeros()).unwrap();
        assert!(matches!(steady_state(&zero), Err(Error::Degenerate(_))));
    }

    #[test]
    fn default_preset_polarizes_near_96_percent() {
        for name in PhotophysicsParams::PRESETS {
            let params = PhotophysicsParams::preset(name).unwrap();
            let m = build_rate_matrix(&params, true, 1.0 / 2.856e-3).unwrap();
            let pol = steady_state(&m).unwrap().ground_polarization();
            assert!((0.94..=0.98).contains(&pol), "{name}: {pol}");
        }
        assert!(PhotophysicsParams::preset("nope").is_none());
    }

    #[test]
    fn fluorescence_rate_examples() {
        let p = PhotophysicsParams {
            radiative_rate: 8e7,
            ..PhotophysicsParams::default()
        };
        assert_eq!(fluorescence_rate(&PopulationState::ground(0.4, 0.6).unwrap(), &p), 0.0);
        let excited = PopulationState::new([0.0, 0.0, 0.5, 0.5, 0.0]).unwrap();
        assert_abs_diff_eq!(fluorescence_rate(&excited, &p), 8e7, epsilon = 1e-6);
    }

    #[test]
    fn bright_state_outshines_pulsed_state() {
        let params = PhotophysicsParams::default();
        let on = build_rate_matrix(&params, true, 350.0).unwrap();
        let init = relax_to_ground(&steady_state(&on).unwrap(), &params);
        let flipped = apply_pi_pulse(&init, 1.0).unwrap();
        let (_, bright) = propagate_with_fluorescence(&init, &on, &params, 300e-9).unwrap();
        let (_, dark) = propagate_with_fluorescence(&flipped, &on, &params, 300e-9).unwrap();
        assert!(bright > dark, "{bright} vs {dark}");
        let ss = steady_state(&on).unwrap();
        let ss_flipped = apply_pi_pulse(&ss, 1.0).unwrap();
        let (_, a) = propagate_with_fluorescence(&ss, &on, &params, 300e-9).unwrap();
        let (_, b) = propagate_with_fluorescence(&ss_flipped, &on, &params, 300e-9).unwrap();
        assert!(a > b);
    }

    #[test]
    fn spin_dependent_darkness() {
        let params = PhotophysicsParams::default();
        let on = build_rate_matrix(&params, true, 0.0).unwrap();
        let (_, from_0) =
            propagate_with_fluorescence(&PopulationState::ground(1.0, 0.0).unwrap(), &on, &params, 300e-9).unwrap();
        let (_, from_1) =
            propagate_with_fluorescence(&PopulationState::ground(0.0, 1.0).unwrap(), &on, &params, 300e-9).unwrap();
        assert!(from_0 > from_1);
    }

    #[test]
    fn fluorescence_integral_matches_quadrature() {
        // Composite Simpson on fluorescence_rate sampled through propagate.
        let params = PhotophysicsParams::default();
        let on = build_rate_matrix(&params, true, 350.0).unwrap();
        let p0 = PopulationState::ground(0.9, 0.1).unwrap();
        let t = 300e-9;
        let n = 600;
        let h = t / n as f64;
        let mut acc = 0.0;
        for k in 0..=n {
            let w = if k == 0 || k == n {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let p = propagate(&p0, &on, k as f64 * h).unwrap();
            acc += w * fluorescence_rate(&p, &params);
        }
        let simpson = acc * h / 3.0;
        let (_, exact) = propagate_with_fluorescence(&p0, &on, &params, t).unwrap();
        assert_abs_diff_eq!(exact, simpson, epsilon = 1e-9 * simpson.abs().max(1.0));
    }

    #[test]
    fn relaxation_log_slope_matches_gamma1() {
        let params = sublevel_eq();
        let gamma1 = 420.0;
        let m = build_rate_matrix(&params, false, gamma1).unwrap();
        let p0 = PopulationState::ground(0.95, 0.05).unwrap();
        let diff = |p: &PopulationState| p.get(Level::G0) - p.ground_total() / 3.0;
        let d0 = diff(&p0);
        for t in [1e-4 / gamma1, 1e-2 / gamma1, 1.0 / gamma1, 5.0 / gamma1] {
            let d = diff(&propagate(&p0, &m, t).unwrap());
            let slope = (d / d0).ln() / t;
            assert!((slope / -gamma1 - 1.0).abs() < 1e-3, "t={t}: slope {slope}");
        }
    }

    #[test]
    fn relax_to_ground_conserves_and_empties() {
        let params = PhotophysicsParams::default();
        let p = PopulationState::new([0.3, 0.2, 0.2, 0.1, 0.2]).unwrap();
        let r = relax_to_ground(&p, &params);
        assert_abs_diff_eq!(r.ground_total(), 1.0, epsilon = 1e-15);
        // Matches a long laser-off propagation without spin relaxation.
        let off = build_rate_matrix(&params, false, 0.0).unwrap();
        let long = propagate(&p, &off, 2e-5).unwrap();
        assert_abs_diff_eq!(long.get(Level::G0), r.get(Level::G0), epsilon = 1e-10);
    }

    prop_compose! {
        fn arb_params()(
            pump in 0.0..5e7_f64,
            rad in 1e6..1e8_f64,
            isc0 in 0.0..3e7_f64,
            extra in 1e5..1e8_f64,
            singlet in 1e5..1e7_f64,
            branch in 0.0..=1.0_f64,
            pi0 in 0.05..0.95_f64,
        ) -> PhotophysicsParams {
            PhotophysicsParams {
                pump_rate: pump,
                radiative_rate: rad,
                isc_rate_ms0: isc0,
                isc_rate_ms1: isc0 + extra,
                singlet_decay_rate: singlet,
                singlet_branch_to_ms0: branch,
                thermal_ms0_population: pi0,
                zfs_ghz: 2.87,
            }
        }
    }

    fn arb_state() -> impl Strategy<Value = PopulationState> {
        proptest::array::uniform5(0.001..1.0_f64).prop_map(|raw| {
            let s: f64 = raw.iter().sum();
            let mut p = raw.map(|x| x / s);
            let drift: f64 = 1.0 - p.iter().sum::<f64>();
            p[0] += drift;
            PopulationState::new(p).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn columns_sum_to_zero(params in arb_params(), laser in any::<bool>(), g in 0.0..1e4_f64) {
            let m = build_rate_matrix(&params, laser, g).unwrap();
            for j in 0..N_LEVELS {
                let col = m.as_matrix().column(j);
                prop_assert!(col.sum().abs() <= 1e-12 * m.max_rate().max(1.0));
                prop_assert!(col.sum().abs() <= 1e-7, "absolute column sum {}", col.sum());
                for i in 0..N_LEVELS {
                    if i != j { prop_assert!(m.as_matrix()[(i, j)] >= 0.0); }
                }
            }
        }

        #[test]
        fn propagation_conserves_and_stays_nonnegative(
            params in arb_params(), state in arb_state(), laser in any::<bool>(),
            g in 1.0..1e4_f64, t in 0.0..1e-2_f64,
        ) {
            let m = build_rate_matrix(&params, laser, g).unwrap();
            let out = propagate(&state, &m, t).unwrap();
            prop_assert!((out.as_vector().sum() - 1.0).abs() < 1e-10);
            prop_assert!(out.as_array().iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn propagation_is_a_semigroup(
            params in arb_params(), state in arb_state(), laser in any::<bool>(),
            g in 1.0..1e4_f64, t1 in 0.0..2e-3_f64, t2 in 0.0..2e-3_f64,
        ) {
            let m = build_rate_matrix(&params, laser, g).unwrap();
            let two_step = propagate(&propagate(&state, &m, t1).unwrap(), &m, t2).unwrap();
            let one_step = propagate(&state, &m, t1 + t2).unwrap();
            for (a, b) in two_step.as_array().iter().zip(one_step.as_array()) {
                prop_assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }

        #[test]
        fn steady_state_is_in_the_kernel(params in arb_params(), g in 1.0..1e4_f64, laser in any::<bool>()) {
            let m = build_rate_matrix(&params, laser, g).unwrap();
            let ss = steady_state(&m).unwrap();
            let residual = m.apply(&ss);
            // Relative to the fastest rate: an absolute 1e-10 is below f64
            // resolution when rates reach 1e8/s.
            prop_assert!(residual.amax() <= 1e-10 * m.max_rate().max(1.0), "{residual}");
        }

        #[test]
        fn steady_state_of_moderate_generators(raw in proptest::collection::vec(0.0..10.0_f64, 20)) {
            let mut m = Matrix5::zeros();
            let mut k = 0;
            for j in 0..N_LEVELS {
                for i in 0..N_LEVELS {
                    if i != j { m[(i, j)] = raw[k] + 0.1; k += 1; }
                }
            }
            for j in 0..N_LEVELS {
                let s: f64 = (0..N_LEVELS).filter(|&i| i != j).map(|i| m[(i, j)]).sum();
                m[(j, j)] = -s;
            }
            let m = RateMatrix::from_matrix(m).unwrap();
            let ss = steady_state(&m).unwrap();
            prop_assert!(m.apply(&ss).amax() < 1e-10);
        }
    }
}
