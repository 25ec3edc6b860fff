//! Simulation and analysis toolkit for NV-center T1 relaxometry sensing.
//!
//! The pipeline runs from spin photophysics ([`spin`]) through the two-branch
//! T1 protocol ([`sequence`]) and photon counting ([`detector`]) to a
//! differential trace, which [`fit`] reduces to a T1 value. [`noise`] links
//! T1 shifts to the amount of Gd³⁺-labelled analyte on the surface, and
//! [`assay`] turns (amount, T1) data into a calibration line with a
//! detection limit.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assay;
pub mod detector;
mod error;
pub mod fit;
pub mod io;
pub mod noise;
pub mod rng;
pub mod sequence;
pub mod spin;

pub use assay::{
    average_replicates, detection_limit, fit_calibration, quantify, CalibrationModel, CalibrationOptions,
    CalibrationPoint, Quantification, ReplicateSummary,
};
pub use detector::{differential_signal, DetectorParams};
pub use error::{Error, Result};
pub use fit::{bootstrap_t1_err, fit_exponential, initial_guess, oracle_fit, ExpParams, FitOptions, FitResult, OracleGrid};
pub use noise::{amount_from_t1, effective_t1, gd_relaxation_rate, AmountUnit, RelaxationBudget, SurfaceSample};
pub use sequence::{build_t1_pair, execute, sweep, validate, PulseSequence, Segment, T1Protocol, Trace, TraceRow};
pub use spin::{
    apply_pi_pulse, build_rate_matrix, fluorescence_rate, propagate, steady_state, PhotophysicsParams,
    PopulationState, RateMatrix,
};
