//! Photon counting and the two-branch differential readout.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, ensure_nonneg, Error, Result};

/// Means above this are sampled from `N(μ, μ)` rounded to the nearest
/// integer instead of an exact Poisson draw.
pub const NORMAL_APPROX_CUTOFF: f64 = 1e4;

/// Smallest `sig1 + sig2` for which the first-order error is trustworthy.
pub const MIN_RELIABLE_COUNTS: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorParams {
    pub collection_efficiency: f64,
    /// Background count rate, counts/s.
    pub background_rate: f64,
    /// Emit expected counts without shot noise.
    pub noiseless: bool,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            collection_efficiency: 0.1,
            background_rate: 0.0,
            noiseless: false,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.collection_efficiency > 0.0 && self.collection_efficiency <= 1.0) {
            return Err(domain(
                "collection_efficiency",
                format!("expected a value in (0, 1], got {}", self.collection_efficiency),
            ));
        }
        ensure_nonneg("background_rate", self.background_rate)
    }

    /// Mean counts accumulated over `shots` repetitions of a readout window.
    pub fn expected_counts(&self, fluor_integral: f64, window_s: f64, shots: u64) -> f64 {
        shots as f64 * (self.collection_efficiency * fluor_integral + self.background_rate * window_s)
    }

    /// A shot-noise realization of `mean`, or `mean` itself when noiseless.
    pub fn sample_counts<R: Rng + ?Sized>(&self, mean: f64, rng: &mut R) -> f64 {
        if self.noiseless {
            mean
        } else {
            sample_poisson(mean, rng)
        }
    }
}

/// Poisson draw, using the normal approximation above [`NORMAL_APPROX_CUTOFF`].
pub fn sample_poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> f64 {
    debug_assert!(mean >= 0.0);
    if !(mean > 0.0) {
        return 0.0;
    }
    if mean > NORMAL_APPROX_CUTOFF {
        let z: f64 = StandardNormal.sample(rng);
        return (mean + mean.sqrt() * z).round().max(0.0);
    }
    Poisson::new(mean).expect("finite positive mean").sample(rng)
}

/// `(sig1 − sig2)/(sig1 + sig2)` and its first-order Poisson error.
pub fn differential_signal(sig1: f64, sig2: f64) -> Result<(f64, f64)> {
    ensure_nonneg("sig1", sig1)?;
    ensure_nonneg("sig2", sig2)?;
    let total = sig1 + sig2;
    if total == 0.0 {
        return Err(Error::DegenerateReadout { tau_s: None });
    }
    let signal = (sig1 - sig2) / total;
    let err = 2.0 * (sig1 * sig2 * total).sqrt() / (total * total);
    Ok((signal, err))
}
