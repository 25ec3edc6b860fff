//! Gd³⁺ spin-noise channel: bound label amount ↔ added relaxation rate.
//!
//! Independent relaxation channels add in rate, so a surface carrying
//! `amount` units of label shortens T1 to `1 / (1/T1_int + κ·g·amount)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{domain, ensure_nonneg, ensure_positive, Error, Result};

/// Relative slack allowed when a measured T1 exceeds its baseline.
pub const BASELINE_SLACK: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AmountUnit {
    Fmol,
    Pmol,
}

impl fmt::Display for AmountUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AmountUnit::Fmol => "fmol",
            AmountUnit::Pmol => "pmol",
        })
    }
}

impl FromStr for AmountUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "fmol" => Ok(AmountUnit::Fmol),
            "pmol" => Ok(AmountUnit::Pmol),
            other => Err(domain("unit", format!("unknown amount unit `{other}` (expected fmol or pmol)"))),
        }
    }
}

/// Analyte bound to the sensing surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceSample {
    pub amount: f64,
    pub unit: AmountUnit,
    /// κ, added relaxation rate per unit amount, 1/(ms·unit).
    pub coupling_per_unit: f64,
    /// Dimensionless scale on κ for standoff changes.
    #[serde(default = "default_geometry")]
    pub geometry_factor: f64,
}

fn default_geometry() -> f64 {
    1.0
}

impl SurfaceSample {
    pub fn new(amount: f64, unit: AmountUnit, coupling_per_unit: f64) -> Result<Self> {
        let s = Self {
            amount,
            unit,
            coupling_per_unit,
            geometry_factor: 1.0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_geometry(mut self, geometry_factor: f64) -> Result<Self> {
        self.geometry_factor = geometry_factor;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_nonneg("amount", self.amount)?;
        ensure_positive("coupling_per_unit", self.coupling_per_unit)?;
        ensure_nonneg("geometry_factor", self.geometry_factor)
    }

    fn effective_coupling(&self) -> f64 {
        self.coupling_per_unit * self.geometry_factor
    }
}

/// Decomposition of the total longitudinal relaxation rate, in 1/ms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxationBudget {
    pub gamma_intrinsic: f64,
    pub gamma_gd: f64,
}

impl RelaxationBudget {
    pub fn new(gamma_intrinsic: f64, gamma_gd: f64) -> Result<Self> {
        ensure_nonneg("gamma_intrinsic", gamma_intrinsic)?;
        ensure_nonneg("gamma_gd", gamma_gd)?;
        Ok(Self {
            gamma_intrinsic,
            gamma_gd,
        })
    }

    pub fn from_sample(t1_intrinsic_ms: f64, sample: &SurfaceSample) -> Result<Self> {
        ensure_positive("t1_intrinsic_ms", t1_intrinsic_ms)?;
        sample.validate()?;
        Self::new(1.0 / t1_intrinsic_ms, gd_relaxation_rate(sample))
    }

    /// Total rate, 1/ms.
    pub fn total(&self) -> f64 {
        self.gamma_intrinsic + self.gamma_gd
    }

    /// `1 / total`, in ms.
    pub fn t1_ms(&self) -> f64 {
        1.0 / self.total()
    }
}

/// Added relaxation rate `κ·g·amount`, in 1/ms.
pub fn gd_relaxation_rate(sample: &SurfaceSample) -> f64 {
    sample.effective_coupling() * sample.amount
}

pub fn effective_t1(t1_intrinsic_ms: f64, gamma_gd: f64) -> Result<f64> {
    ensure_positive("t1_intrinsic_ms", t1_intrinsic_ms)?;
    ensure_nonneg("gamma_gd", gamma_gd)?;
    Ok(1.0 / (1.0 / t1_intrinsic_ms + gamma_gd))
}

/// Inverts [`effective_t1`]: the amount whose added rate explains the drop
/// from `t1_baseline_ms` to `t1_measured_ms`, in the template's unit.
///
/// A measurement above baseline clamps to zero while within
/// [`BASELINE_SLACK`]; beyond that it is reported as inconsistent.
pub fn amount_from_t1(t1_measured_ms: f64, t1_baseline_ms: f64, template: &SurfaceSample) -> Result<f64> {
    ensure_positive("t1_measured_ms", t1_measured_ms)?;
    ensure_positive("t1_baseline_ms", t1_baseline_ms)?;
    let coupling = template.effective_coupling();
    if !(coupling > 0.0) {
        return Err(domain("coupling_per_unit", "κ·geometry_factor must be > 0"));
    }
    if t1_measured_ms > t1_baseline_ms * (1.0 + BASELINE_SLACK) {
        return Err(Error::Inconsistent(format!(
            "measured T1 {t1_measured_ms} ms exceeds baseline {t1_baseline_ms} ms by more than {:.0}%",
            BASELINE_SLACK * 100.0
        )));
    }
    if t1_measured_ms >= t1_baseline_ms {
        return Ok(0.0);
    }
    Ok((1.0 / t1_measured_ms - 1.0 / t1_baseline_ms) / coupling)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const KAPPA: f64 = 0.012905;

    fn template() -> SurfaceSample {
        SurfaceSample::new(0.0, AmountUnit::Fmol, KAPPA).unwrap()
    }

    #[test]
    fn rate_examples() {
        assert_eq!(gd_relaxation_rate(&template()), 0.0);
        let s = SurfaceSample::new(73.5, AmountUnit::Fmol, KAPPA).unwrap();
        // κ was chosen so 1/0.77 − 1/2.856 ≈ 0.94856 /ms at 73.5 fmol.
        assert_relative_eq!(gd_relaxation_rate(&s), 0.948_517_5, max_relative = 1e-9);
        assert_relative_eq!(gd_relaxation_rate(&s), 1.0 / 0.77 - 1.0 / 2.856, max_relative = 1e-4);
        let doubled = s.clone().with_geometry(2.0).unwrap();
        assert_relative_eq!(gd_relaxation_rate(&doubled), 2.0 * gd_relaxation_rate(&s));
    }

    #[test]
    fn effective_t1_examples() {
        assert_relative_eq!(effective_t1(3.02, 0.0).unwrap(), 3.02, max_relative = 1e-15);
        assert_relative_eq!(effective_t1(2.856, 0.94856).unwrap(), 0.770, max_relative = 1e-4);
        assert!(effective_t1(2.856, 0.5).unwrap() > effective_t1(2.856, 0.6).unwrap());
        assert!(effective_t1(0.0, 0.1).is_err());
        assert!(effective_t1(1.0, -0.1).is_err());
    }

    #[test]
    fn amount_examples() {
        let t = template();
        assert_eq!(amount_from_t1(2.856, 2.856, &t).unwrap(), 0.0);
        let with_bsa = amount_from_t1(2.51, 2.856, &t).unwrap();
        let without = amount_from_t1(0.86, 2.856, &t).unwrap();
        assert_relative_eq!(with_bsa, (1.0 / 2.51 - 1.0 / 2.856) / KAPPA, max_relative = 1e-12);
        assert!((with_bsa - 3.74).abs() < 0.005, "{with_bsa}");
        assert!((without - 62.97).abs() < 0.005, "{without}");
        // Slightly above baseline is noise; far above is an error.
        assert_eq!(amount_from_t1(2.9, 2.856, &t).unwrap(), 0.0);
        assert!(matches!(amount_from_t1(3.5, 2.856, &t), Err(Error::Inconsistent(_))));
        let flat = SurfaceSample::new(0.0, AmountUnit::Fmol, KAPPA).unwrap().with_geometry(0.0).unwrap();
        assert!(amount_from_t1(1.0, 2.856, &flat).is_err());
    }

    #[test]
    fn sample_validation() {
        assert!(SurfaceSample::new(-1.0, AmountUnit::Fmol, KAPPA).is_err());
        assert!(SurfaceSample::new(1.0, AmountUnit::Fmol, 0.0).is_err());
        assert!(template().with_geometry(-0.5).is_err());
        assert_eq!("pmol".parse::<AmountUnit>().unwrap(), AmountUnit::Pmol);
        assert!("nmol".parse::<AmountUnit>().is_err());
    }

    proptest! {
        #[test]
        fn round_trip(t1b in 0.1..20.0_f64, amount in 0.0..500.0_f64, kappa in 1e-4..1.0_f64, g in 0.01..3.0_f64) {
            let s = SurfaceSample::new(amount, AmountUnit::Fmol, kappa).unwrap().with_geometry(g).unwrap();
            let t1 = effective_t1(t1b, gd_relaxation_rate(&s)).unwrap();
            let back = amount_from_t1(t1, t1b, &s).unwrap();
            prop_assert!((back - amount).abs() <= 1e-9 * amount.max(1e-3), "{back} vs {amount}");
        }

        #[test]
        fn rates_add(t1 in 0.01..50.0_f64, a in 0.0..10.0_f64, b in 0.0..10.0_f64) {
            let twice = effective_t1(effective_t1(t1, a).unwrap(), b).unwrap();
            let once = effective_t1(t1, a + b).unwrap();
            prop_assert!((twice - once).abs() <= 1e-12 * once.max(1.0));
        }

        #[test]
        fn rate_is_linear(amount in 0.0..1e3_f64, c in 0.0..10.0_f64) {
            let s = SurfaceSample::new(amount, AmountUnit::Pmol, 0.05).unwrap();
            let scaled = SurfaceSample { amount: amount * c, ..s.clone() };
            prop_assert!((gd_relaxation_rate(&scaled) - c * gd_relaxation_rate(&s)).abs() <= 1e-12 * (1.0 + amount * c));
        }
    }
}
