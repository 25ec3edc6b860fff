//! Experiment configuration (JSON).
//!
//! Every key except the intrinsic relaxation is optional; missing keys take
//! documented defaults, and [`ResolvedConfig`] records the fully expanded
//! result so a run can be reproduced from its sidecar alone.

use serde::{Deserialize, Serialize};

use crate::detector::DetectorParams;
use crate::error::{Error, Result};
use crate::noise::{AmountUnit, RelaxationBudget, SurfaceSample};
use crate::sequence::{tau_grid, T1Protocol};
use crate::spin::{PhotophysicsParams, DEFAULT_PRESET};

/// Label coupling κ calibrated on the LBT reference pair, 1/(ms·fmol).
pub const DEFAULT_COUPLING_PER_FMOL: f64 = 0.012905;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub photophysics: PhotophysicsConfig,
    pub t1_intrinsic_ms: Option<f64>,
    /// Intrinsic relaxation rate, 1/ms.
    pub gamma_intrinsic: Option<f64>,
    #[serde(default)]
    pub sample: SampleConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub detector: DetectorConfig,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhotophysicsConfig {
    pub preset: Option<String>,
    #[serde(default)]
    pub overrides: PhotophysicsOverrides,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhotophysicsOverrides {
    pub pump_rate: Option<f64>,
    pub radiative_rate: Option<f64>,
    pub isc_rate_ms0: Option<f64>,
    pub isc_rate_ms1: Option<f64>,
    pub singlet_decay_rate: Option<f64>,
    pub singlet_branch_to_ms0: Option<f64>,
    pub thermal_ms0_population: Option<f64>,
    pub zfs_ghz: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub amount: Option<f64>,
    pub unit: Option<AmountUnit>,
    pub coupling_per_unit: Option<f64>,
    pub geometry_factor: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub tau_min_s: Option<f64>,
    pub tau_max_s: Option<f64>,
    pub n_tau: Option<usize>,
    pub log_spacing: Option<bool>,
    pub init_laser_s: Option<f64>,
    pub readout_laser_s: Option<f64>,
    pub readout_offset_s: Option<f64>,
    pub readout_length_s: Option<f64>,
    pub shots_per_point: Option<u64>,
    pub pi_fidelity: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub collection_efficiency: Option<f64>,
    pub background_rate: Option<f64>,
    pub noiseless: Option<bool>,
}

/// Everything a simulation needs, with defaults filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub preset: String,
    pub photophysics: PhotophysicsParams,
    pub t1_intrinsic_ms: f64,
    pub gamma_intrinsic: f64,
    pub sample: SurfaceSample,
    pub protocol: ResolvedProtocol,
    pub detector: DetectorParams,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedProtocol {
    pub tau_min_s: f64,
    pub tau_max_s: f64,
    pub n_tau: usize,
    pub log_spacing: bool,
    pub init_laser_s: f64,
    pub readout_laser_s: f64,
    pub readout_offset_s: f64,
    pub readout_length_s: f64,
    pub shots_per_point: u64,
    pub pi_fidelity: f64,
}

impl Default for ResolvedProtocol {
    fn default() -> Self {
        let p = T1Protocol::default();
        Self {
            tau_min_s: 10e-6,
            tau_max_s: 15e-3,
            n_tau: 30,
            log_spacing: true,
            init_laser_s: p.init_laser_s,
            readout_laser_s: p.readout_laser_s,
            readout_offset_s: p.readout_offset_s,
            readout_length_s: p.readout_length_s,
            shots_per_point: p.shots_per_point,
            pi_fidelity: p.pi_fidelity,
        }
    }
}

impl ResolvedProtocol {
    pub fn to_protocol(&self) -> Result<T1Protocol> {
        let grid = tau_grid(self.tau_min_s, self.tau_max_s, self.n_tau, self.log_spacing)
            .map_err(|e| config_err("protocol.tau_min_s", e))?;
        let p = T1Protocol {
            init_laser_s: self.init_laser_s,
            readout_laser_s: self.readout_laser_s,
            readout_offset_s: self.readout_offset_s,
            readout_length_s: self.readout_length_s,
            tau_grid_s: grid,
            shots_per_point: self.shots_per_point,
            pi_fidelity: self.pi_fidelity,
        };
        p.validate().map_err(|e| config_err(protocol_key(&e), e))?;
        Ok(p)
    }
}

impl ResolvedConfig {
    pub fn budget(&self) -> Result<RelaxationBudget> {
        RelaxationBudget::from_sample(self.t1_intrinsic_ms, &self.sample)
    }
}

fn config_err(key: impl Into<String>, e: impl std::fmt::Display) -> Error {
    Error::Config {
        key: key.into(),
        message: e.to_string(),
    }
}

fn param_name(e: &Error) -> Option<&'static str> {
    match e {
        Error::ParameterDomain { name, .. } => Some(name),
        _ => None,
    }
}

fn protocol_key(e: &Error) -> String {
    match param_name(e) {
        Some("tau_grid_s") | None => "protocol".into(),
        Some(name) => format!("protocol.{name}"),
    }
}

/// Parses JSON text, reporting the key path of the first malformed value.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

impl ExperimentConfig {
    /// Fills defaults and checks every invariant, naming the offending key.
    pub fn resolve(&self, seed_override: Option<u64>) -> Result<ResolvedConfig> {
        let preset = self.photophysics.preset.clone().unwrap_or_else(|| DEFAULT_PRESET.to_string());
        let mut phys = PhotophysicsParams::preset(&preset).ok_or_else(|| {
            config_err(
                "photophysics.preset",
                format!("unknown preset `{preset}` (known: {})", PhotophysicsParams::PRESETS.join(", ")),
            )
        })?;
        let o = &self.photophysics.overrides;
        let fields: [(&mut f64, Option<f64>); 8] = [
            (&mut phys.pump_rate, o.pump_rate),
            (&mut phys.radiative_rate, o.radiative_rate),
            (&mut phys.isc_rate_ms0, o.isc_rate_ms0),
            (&mut phys.isc_rate_ms1, o.isc_rate_ms1),
            (&mut phys.singlet_decay_rate, o.singlet_decay_rate),
            (&mut phys.singlet_branch_to_ms0, o.singlet_branch_to_ms0),
            (&mut phys.thermal_ms0_population, o.thermal_ms0_population),
            (&mut phys.zfs_ghz, o.zfs_ghz),
        ];
        for (slot, value) in fields {
            if let Some(v) = value {
                *slot = v;
            }
        }
        phys.validate().map_err(|e| {
            let key = param_name(&e).map_or("photophysics".to_string(), |n| format!("photophysics.overrides.{n}"));
            config_err(key, e)
        })?;

        let t1_intrinsic_ms = match (self.t1_intrinsic_ms, self.gamma_intrinsic) {
            (Some(t1), None) => t1,
            (None, Some(g)) => {
                if !(g > 0.0) {
                    return Err(config_err("gamma_intrinsic", format!("must be > 0, got {g}")));
                }
                1.0 / g
            }
            (Some(_), Some(_)) => {
                return Err(config_err(
                    "t1_intrinsic_ms",
                    "give exactly one of t1_intrinsic_ms and gamma_intrinsic, not both",
                ))
            }
            (None, None) => {
                return Err(config_err(
                    "t1_intrinsic_ms",
                    "one of t1_intrinsic_ms or gamma_intrinsic is required",
                ))
            }
        };
        if !(t1_intrinsic_ms > 0.0 && t1_intrinsic_ms.is_finite()) {
            return Err(config_err("t1_intrinsic_ms", format!("must be > 0, got {t1_intrinsic_ms}")));
        }

        let s = &self.sample;
        let sample = SurfaceSample {
            amount: s.amount.unwrap_or(0.0),
            unit: s.unit.unwrap_or(AmountUnit::Fmol),
            coupling_per_unit: s.coupling_per_unit.unwrap_or(DEFAULT_COUPLING_PER_FMOL),
            geometry_factor: s.geometry_factor.unwrap_or(1.0),
        };
        if s.unit == Some(AmountUnit::Pmol) && s.coupling_per_unit.is_none() {
            return Err(config_err(
                "sample.coupling_per_unit",
                "the default coupling is per fmol; give coupling_per_unit explicitly for pmol samples",
            ));
        }
        sample.validate().map_err(|e| {
            let key = param_name(&e).map_or("sample".to_string(), |n| format!("sample.{n}"));
            config_err(key, e)
        })?;

        let d = ResolvedProtocol::default();
        let p = &self.protocol;
        let protocol = ResolvedProtocol {
            tau_min_s: p.tau_min_s.unwrap_or(d.tau_min_s),
            tau_max_s: p.tau_max_s.unwrap_or(d.tau_max_s),
            n_tau: p.n_tau.unwrap_or(d.n_tau),
            log_spacing: p.log_spacing.unwrap_or(d.log_spacing),
            init_laser_s: p.init_laser_s.unwrap_or(d.init_laser_s),
            readout_laser_s: p.readout_laser_s.unwrap_or(d.readout_laser_s),
            readout_offset_s: p.readout_offset_s.unwrap_or(d.readout_offset_s),
            readout_length_s: p.readout_length_s.unwrap_or(d.readout_length_s),
            shots_per_point: p.shots_per_point.unwrap_or(d.shots_per_point),
            pi_fidelity: p.pi_fidelity.unwrap_or(d.pi_fidelity),
        };
        protocol.to_protocol()?;

        let dd = DetectorParams::default();
        let detector = DetectorParams {
            collection_efficiency: self.detector.collection_efficiency.unwrap_or(dd.collection_efficiency),
            background_rate: self.detector.background_rate.unwrap_or(dd.background_rate),
            noiseless: self.detector.noiseless.unwrap_or(dd.noiseless),
        };
        detector.validate().map_err(|e| {
            let key = param_name(&e).map_or("detector".to_string(), |n| format!("detector.{n}"));
            config_err(key, e)
        })?;

        Ok(ResolvedConfig {
            preset,
            photophysics: phys,
            t1_intrinsic_ms,
            gamma_intrinsic: 1.0 / t1_intrinsic_ms,
            sample,
            protocol,
            detector,
            seed: seed_override.or(self.seed).unwrap_or(0),
        })
    }
}
