//! The two-branch T1 protocol: sequence construction, validation, and
//! execution against the spin and detector models.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{differential_signal, DetectorParams};
use crate::error::{domain, ensure_fraction, ensure_nonneg, Error, Result};
use crate::noise::RelaxationBudget;
use crate::rng::{derive_seed, rng_for};
use crate::spin::{
    apply_pi_pulse, build_rate_matrix, propagate, propagate_with_fluorescence, relax_to_ground, steady_state,
    PhotophysicsParams, PopulationState,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    Laser { duration: f64 },
    /// Instantaneous π pulse.
    MwPi { fidelity: f64 },
    Wait { duration: f64 },
    /// Photon-collection window, relative to the start of the preceding
    /// Laser segment that hosts it.
    Readout { offset: f64, length: f64 },
}

impl Segment {
    /// Wall-clock length; zero for the instantaneous and annotation kinds.
    pub fn duration(&self) -> f64 {
        match *self {
            Segment::Laser { duration } | Segment::Wait { duration } => duration,
            Segment::MwPi { .. } | Segment::Readout { .. } => 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    pub segments: Vec<Segment>,
}

impl PulseSequence {
    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(Segment::duration).sum()
    }

    pub fn count_pi_pulses(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| matches!(s, Segment::MwPi { .. }))
            .count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    Ordering,
    Duration,
    Containment,
    MwInsideLaser,
    Parameter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub index: usize,
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "segment {}: {:?}: {}", self.index, self.kind, self.message)
    }
}

/// Structural checks. An empty list means the sequence can be executed.
pub fn validate(seq: &PulseSequence) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |index, kind, message: String| out.push(Violation { index, kind, message });
    let segs = &seq.segments;

    match segs.first() {
        Some(Segment::Laser { .. }) => {}
        Some(_) => push(0, ViolationKind::Ordering, "sequence must start with an initialization laser".into()),
        None => push(0, ViolationKind::Ordering, "sequence is empty".into()),
    }
    let readouts = segs.iter().filter(|s| matches!(s, Segment::Readout { .. })).count();
    if !segs.is_empty() && readouts != 1 {
        push(
            segs.len().saturating_sub(1),
            ViolationKind::Ordering,
            format!("expected exactly one readout window, found {readouts}"),
        );
    }

    for (i, seg) in segs.iter().enumerate() {
        match *seg {
            Segment::Laser { duration } | Segment::Wait { duration } => {
                if !(duration.is_finite() && duration >= 0.0) {
                    push(i, ViolationKind::Duration, format!("duration must be >= 0, got {duration}"));
                }
            }
            Segment::MwPi { fidelity } => {
                if !(0.0..=1.0).contains(&fidelity) {
                    push(i, ViolationKind::Parameter, format!("pi fidelity must lie in [0, 1], got {fidelity}"));
                }
            }
            Segment::Readout { offset, length } => {
                if !(offset.is_finite() && offset >= 0.0 && length.is_finite() && length > 0.0) {
                    push(
                        i,
                        ViolationKind::Duration,
                        format!("readout window needs offset >= 0 and length > 0, got ({offset}, {length})"),
                    );
                    continue;
                }
                match i.checked_sub(1).map(|j| &segs[j]) {
                    Some(Segment::Laser { duration }) => {
                        if offset + length > *duration {
                            push(
                                i,
                                ViolationKind::Containment,
                                format!("readout window ends at {} s, after its laser pulse ({duration} s)", offset + length),
                            );
                        }
                    }
                    Some(Segment::MwPi { .. }) => push(
                        i - 1,
                        ViolationKind::MwInsideLaser,
                        "microwave pulse placed inside the readout laser pulse".into(),
                    ),
                    Some(other) => push(
                        i,
                        ViolationKind::Containment,
                        format!("readout window must sit inside a laser pulse, not {other:?}"),
                    ),
                    None => push(i, ViolationKind::Containment, "readout window has no host laser pulse".into()),
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct T1Protocol {
    pub init_laser_s: f64,
    pub readout_laser_s: f64,
    pub readout_offset_s: f64,
    pub readout_length_s: f64,
    pub tau_grid_s: Vec<f64>,
    pub shots_per_point: u64,
    pub pi_fidelity: f64,
}

impl Default for T1Protocol {
    fn default() -> Self {
        Self {
            init_laser_s: 5e-6,
            readout_laser_s: 3e-6,
            readout_offset_s: 0.0,
            readout_length_s: 300e-9,
            tau_grid_s: tau_grid(10e-6, 15e-3, 30, true).expect("valid default grid"),
            shots_per_point: 1_000_000,
            pi_fidelity: 1.0,
        }
    }
}

/// Evenly spaced (or log-spaced) delays from `min` to `max` inclusive.
pub fn tau_grid(min: f64, max: f64, n: usize, log_spacing: bool) -> Result<Vec<f64>> {
    if !(min > 0.0 && max > min && max.is_finite()) {
        return Err(domain("tau_grid", format!("need 0 < tau_min < tau_max, got ({min}, {max})")));
    }
    if n < 2 {
        return Err(domain("tau_grid", format!("need at least 2 points, got {n}")));
    }
    let last = (n - 1) as f64;
    let grid = (0..n)
        .map(|i| {
            let f = i as f64 / last;
            if i == 0 {
                min
            } else if i == n - 1 {
                max
            } else if log_spacing {
                (min.ln() + f * (max.ln() - min.ln())).exp()
            } else {
                min + f * (max - min)
            }
        })
        .collect::<Vec<_>>();
    Ok(grid)
}

impl T1Protocol {
    pub fn validate(&self) -> Result<()> {
        ensure_nonneg("init_laser_s", self.init_laser_s)?;
        ensure_nonneg("readout_laser_s", self.readout_laser_s)?;
        ensure_nonneg("readout_offset_s", self.readout_offset_s)?;
        ensure_fraction("pi_fidelity", self.pi_fidelity)?;
        if !(self.readout_length_s > 0.0) {
            return Err(domain("readout_length_s", "readout window must have positive length"));
        }
        if self.readout_offset_s + self.readout_length_s > self.readout_laser_s {
            return Err(domain("readout_length_s", "readout window exceeds the readout laser pulse"));
        }
        if self.shots_per_point == 0 {
            return Err(domain("shots_per_point", "must be >= 1"));
        }
        if self.tau_grid_s.is_empty() {
            return Err(domain("tau_grid_s", "grid is empty"));
        }
        if self.tau_grid_s.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(domain("tau_grid_s", "every delay must be > 0"));
        }
        if self.tau_grid_s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(domain("tau_grid_s", "delays must be strictly increasing"));
        }
        Ok(())
    }
}

/// Branch A (no π pulse) and branch B (π pulse after initialization) for one delay.
pub fn build_t1_pair(protocol: &T1Protocol, tau_s: f64) -> (PulseSequence, PulseSequence) {
    let init = Segment::Laser {
        duration: protocol.init_laser_s,
    };
    let tail = [
        Segment::Wait { duration: tau_s },
        Segment::Laser {
            duration: protocol.readout_laser_s,
        },
        Segment::Readout {
            offset: protocol.readout_offset_s,
            length: protocol.readout_length_s,
        },
    ];
    let a = PulseSequence {
        segments: std::iter::once(init).chain(tail).collect(),
    };
    let b = PulseSequence {
        segments: [init, Segment::MwPi { fidelity: protocol.pi_fidelity }]
            .into_iter()
            .chain(tail)
            .collect(),
    };
    (a, b)
}

/// Result of running one branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchReadout {
    /// Photons emitted per shot inside the readout window.
    pub photons_per_shot: f64,
    pub expected_counts: f64,
    pub counts: f64,
}

/// Population after a long initialization pulse: the laser-on steady state,
/// relaxed through the singlet once the laser switches off.
pub fn initialized_state(phys: &PhotophysicsParams, gamma1_per_ms: f64) -> Result<PopulationState> {
    let on = build_rate_matrix(phys, true, gamma1_per_ms * 1e3)?;
    Ok(relax_to_ground(&steady_state(&on)?, phys))
}

/// Runs one sequence and samples the detector.
///
/// The leading Laser segment is the initialization pulse and is assumed long
/// enough to reach the optical steady state; execution starts from
/// [`initialized_state`] right after it. `gamma1_per_ms` is the total ground
/// relaxation rate in 1/ms.
pub fn execute(
    seq: &PulseSequence,
    phys: &PhotophysicsParams,
    gamma1_per_ms: f64,
    detector: &DetectorParams,
    shots: u64,
    rng_seed: u64,
) -> Result<BranchReadout> {
    let violations = validate(seq);
    if !violations.is_empty() {
        return Err(Error::InvalidSequence(violations));
    }
    detector.validate()?;
    let gamma1 = gamma1_per_ms * 1e3;
    let on = build_rate_matrix(phys, true, gamma1)?;
    let off = build_rate_matrix(phys, false, gamma1)?;
    let mut state = initialized_state(phys, gamma1_per_ms)?;

    let segs = &seq.segments;
    let mut readout = None;
    let mut i = 1;
    while i < segs.len() {
        match segs[i] {
            Segment::Laser { duration } => {
                if let Some(&Segment::Readout { offset, length }) = segs.get(i + 1) {
                    let before = propagate(&state, &on, offset)?;
                    let (_, photons) = propagate_with_fluorescence(&before, &on, phys, length)?;
                    readout = Some((photons, length));
                    // Nothing after the readout window affects the counts.
                    break;
                }
                state = propagate(&state, &on, duration)?;
            }
            Segment::MwPi { fidelity } => state = apply_pi_pulse(&state, fidelity)?,
            Segment::Wait { duration } => state = propagate(&state, &off, duration)?,
            Segment::Readout { .. } => unreachable!("validated: readout follows its laser"),
        }
        i += 1;
    }
    let (photons, window) = readout.ok_or_else(|| Error::Numeric("readout window never reached".into()))?;
    let expected = detector.expected_counts(photons, window, shots);
    let mut rng = rng_for(rng_seed, 0);
    Ok(BranchReadout {
        photons_per_shot: photons,
        expected_counts: expected,
        counts: detector.sample_counts(expected, &mut rng),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub tau_s: f64,
    pub sig1: f64,
    pub sig2: f64,
    pub signal: f64,
    /// Absent for imported data without an error column.
    pub signal_err: Option<f64>,
}

/// Differential T1 measurement: one row per delay, sorted by delay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    rows: Vec<TraceRow>,
}

impl Trace {
    pub fn new(rows: Vec<TraceRow>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            let bad = |what: String| Err(domain("trace", format!("row {i}: {what}")));
            if !(r.tau_s.is_finite() && r.tau_s >= 0.0) {
                return bad(format!("tau must be finite and >= 0, got {}", r.tau_s));
            }
            if !(r.sig1 >= 0.0 && r.sig2 >= 0.0) {
                return bad(format!("counts must be >= 0, got ({}, {})", r.sig1, r.sig2));
            }
            if !(-1.0..=1.0).contains(&r.signal) {
                return bad(format!("signal must lie in [-1, 1], got {}", r.signal));
            }
            if let Some(e) = r.signal_err {
                if !(e.is_finite() && e >= 0.0) {
                    return bad(format!("signal_err must be >= 0, got {e}"));
                }
            }
        }
        if rows.windows(2).any(|w| w[1].tau_s <= w[0].tau_s) {
            return Err(domain("trace", "rows must be sorted by strictly increasing tau"));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Delays in ms, the time unit used by the fitter.
    pub fn tau_ms(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.tau_s * 1e3).collect()
    }

    pub fn signals(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.signal).collect()
    }

    /// Errors for every row, or `None` if any row lacks a usable one.
    pub fn errors(&self) -> Option<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r.signal_err.filter(|&e| e > 0.0))
            .collect()
    }

    /// Same delays and errors with new signal values.
    pub fn with_signals(&self, signals: &[f64]) -> Result<Self> {
        assert_eq!(signals.len(), self.rows.len());
        let rows = self
            .rows
            .iter()
            .zip(signals)
            .map(|(r, &s)| TraceRow { signal: s, ..*r })
            .collect();
        Self::new(rows)
    }
}

/// Runs both branches at every delay and forms the differential signal.
///
/// Points run in parallel; each branch draws from a sub-seed fixed by
/// `(rng_seed, point index, branch)`, so the trace is independent of thread
/// count and scheduling.
pub fn sweep(
    protocol: &T1Protocol,
    phys: &PhotophysicsParams,
    budget: &RelaxationBudget,
    detector: &DetectorParams,
    rng_seed: u64,
) -> Result<Trace> {
    protocol.validate()?;
    phys.validate()?;
    detector.validate()?;
    let gamma1 = budget.total();
    let rows = protocol
        .tau_grid_s
        .par_iter()
        .enumerate()
        .map(|(i, &tau)| {
            let (a, b) = build_t1_pair(protocol, tau);
            let i = i as u64;
            let shots = protocol.shots_per_point;
            let ra = execute(&a, phys, gamma1, detector, shots, derive_seed(rng_seed, 2 * i))?;
            let rb = execute(&b, phys, gamma1, detector, shots, derive_seed(rng_seed, 2 * i + 1))?;
            let (signal, err) = differential_signal(ra.counts, rb.counts).map_err(|e| match e {
                Error::DegenerateReadout { .. } => Error::DegenerateReadout { tau_s: Some(tau) },
                other => other,
            })?;
            Ok(TraceRow {
                tau_s: tau,
                sig1: ra.counts,
                sig2: rb.counts,
                signal,
                signal_err: Some(err),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Trace::new(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn noiseless() -> DetectorParams {
        DetectorParams {
            noiseless: true,
            ..DetectorParams::default()
        }
    }

    #[test]
    fn pair_structure() {
        let p = T1Protocol::default();
        let (a, b) = build_t1_pair(&p, 1e-3);
        assert_eq!(a.count_pi_pulses(), 0);
        assert_eq!(b.count_pi_pulses(), 1);
        assert_eq!(a.total_duration(), b.total_duration());
        assert_eq!(b.segments[1], Segment::MwPi { fidelity: 1.0 });
        assert!(validate(&a).is_empty());
        assert!(validate(&b).is_empty());
    }

    #[test]
    fn oversized_readout_window_is_flagged() {
        let p = T1Protocol {
            readout_length_s: 5e-6,
            ..T1Protocol::default()
        };
        assert!(p.validate().is_err());
        let (a, _) = build_t1_pair(&p, 1e-3);
        let v = validate(&a);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::Containment);
    }

    #[test]
    fn readout_in_wait_is_one_containment_violation() {
        let seq = PulseSequence {
            segments: vec![
                Segment::Laser { duration: 1e-6 },
                Segment::Wait { duration: 1e-3 },
                Segment::Readout {
                    offset: 0.0,
                    length: 3e-7,
                },
            ],
        };
        let v = validate(&seq);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].kind, ViolationKind::Containment);
    }

    #[test]
    fn negative_wait_is_one_duration_violation() {
        let (mut a, _) = build_t1_pair(&T1Protocol::default(), 1e-3);
        a.segments[1] = Segment::Wait { duration: -1e-3 };
        let v = validate(&a);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::Duration);
    }

    #[test]
    fn other_violations() {
        let mw_inside = PulseSequence {
            segments: vec![
                Segment::Laser { duration: 1e-6 },
                Segment::Wait { duration: 1e-3 },
                Segment::Laser { duration: 1e-6 },
                Segment::MwPi { fidelity: 1.0 },
                Segment::Readout {
                    offset: 0.0,
                    length: 3e-7,
                },
            ],
        };
        assert_eq!(validate(&mw_inside)[0].kind, ViolationKind::MwInsideLaser);
        assert_eq!(validate(&PulseSequence::default())[0].kind, ViolationKind::Ordering);
        let no_readout = PulseSequence {
            segments: vec![Segment::Laser { duration: 1e-6 }],
        };
        assert_eq!(validate(&no_readout)[0].kind, ViolationKind::Ordering);
        let (mut b, _) = build_t1_pair(&T1Protocol::default(), 1e-3);
        b.segments.insert(0, Segment::Wait { duration: 1e-6 });
        assert!(validate(&b).iter().any(|v| v.kind == ViolationKind::Ordering));
    }

    #[test]
    fn execute_rejects_invalid_sequences() {
        let seq = PulseSequence {
            segments: vec![Segment::Wait { duration: -1.0 }],
        };
        let r = execute(&seq, &PhotophysicsParams::default(), 0.35, &noiseless(), 1, 0);
        assert!(matches!(r, Err(Error::InvalidSequence(_))));
    }

    #[test]
    fn counts_scale_with_shots() {
        let (a, _) = build_t1_pair(&T1Protocol::default(), 1e-4);
        let phys = PhotophysicsParams::default();
        let one = execute(&a, &phys, 0.35, &noiseless(), 1000, 0).unwrap();
        let two = execute(&a, &phys, 0.35, &noiseless(), 2000, 0).unwrap();
        assert_relative_eq!(two.expected_counts, 2.0 * one.expected_counts, max_relative = 1e-14);
        assert_eq!(one.counts, one.expected_counts);
    }

    #[test]
    fn pi_branch_is_darker_at_short_delay() {
        let (a, b) = build_t1_pair(&T1Protocol::default(), 1e-7);
        let phys = PhotophysicsParams::default();
        let ra = execute(&a, &phys, 0.35, &noiseless(), 1000, 0).unwrap();
        let rb = execute(&b, &phys, 0.35, &noiseless(), 1000, 0).unwrap();
        assert!(ra.counts > rb.counts);
    }

    #[test]
    fn branches_converge_at_long_delay() {
        let (a, b) = build_t1_pair(&T1Protocol::default(), 60e-3);
        let phys = PhotophysicsParams::default();
        let gamma1 = 1.0 / 2.856;
        let ra = execute(&a, &phys, gamma1, &noiseless(), 1000, 0).unwrap();
        let rb = execute(&b, &phys, gamma1, &noiseless(), 1000, 0).unwrap();
        assert!((ra.counts - rb.counts).abs() / ra.counts < 1e-8);
        let (a, b) = build_t1_pair(&T1Protocol::default(), 10e-6);
        let ra0 = execute(&a, &phys, gamma1, &noiseless(), 1000, 0).unwrap();
        let rb0 = execute(&b, &phys, gamma1, &noiseless(), 1000, 0).unwrap();
        assert!((ra0.counts - rb0.counts).abs() > 1e6 * (ra.counts - rb.counts).abs());
    }

    #[test]
    fn noiseless_signal_is_a_pure_exponential() {
        let budget = RelaxationBudget::new(1.0 / 2.856, 0.0).unwrap();
        let trace = sweep(&T1Protocol::default(), &PhotophysicsParams::default(), &budget, &noiseless(), 1).unwrap();
        let rows = trace.rows();
        let amp = rows[0].signal / (-budget.total() * rows[0].tau_s * 1e3).exp();
        let t1 = budget.t1_ms();
        for w in rows.windows(2) {
            assert!(w[1].signal < w[0].signal);
        }
        for r in rows {
            let tau_ms = r.tau_s * 1e3;
            assert!((-1.0..=1.0).contains(&r.signal));
            if (0.01 * t1..=3.0 * t1).contains(&tau_ms) {
                let model = amp * (-tau_ms / t1).exp();
                assert!((r.signal / model - 1.0).abs() < 5e-3, "tau {tau_ms}: {} vs {model}", r.signal);
            }
        }
    }

    #[test]
    fn sweep_is_deterministic() {
        let budget = RelaxationBudget::new(0.35, 0.2).unwrap();
        let p = T1Protocol::default();
        let phys = PhotophysicsParams::default();
        let d = DetectorParams::default();
        let a = sweep(&p, &phys, &budget, &d, 99).unwrap();
        let b = sweep(&p, &phys, &budget, &d, 99).unwrap();
        assert_eq!(a, b);
        let c = sweep(&p, &phys, &budget, &d, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_readout_reports_tau() {
        // Zero pumping leaves the readout dark with no background.
        let phys = PhotophysicsParams {
            pump_rate: 0.0,
            ..PhotophysicsParams::default()
        };
        let budget = RelaxationBudget::new(0.35, 0.0).unwrap();
        let r = sweep(&T1Protocol::default(), &phys, &budget, &noiseless(), 0);
        assert!(matches!(r, Err(Error::DegenerateReadout { tau_s: Some(_) }) | Err(Error::Degenerate(_))));
    }

    #[test]
    fn tau_grid_shapes() {
        let g = tau_grid(10e-6, 15e-3, 30, true).unwrap();
        assert_eq!(g.len(), 30);
        assert_relative_eq!(g[0], 10e-6, max_relative = 1e-12);
        assert_relative_eq!(g[29], 15e-3, max_relative = 1e-12);
        let ratio = g[1] / g[0];
        assert!(g.windows(2).all(|w| (w[1] / w[0] / ratio - 1.0).abs() < 1e-9));
        let lin = tau_grid(1.0, 2.0, 3, false).unwrap();
        assert_eq!(lin, vec![1.0, 1.5, 2.0]);
        assert!(tau_grid(0.0, 1.0, 5, true).is_err());
        assert!(tau_grid(1.0, 2.0, 1, true).is_err());
    }

    #[test]
    fn trace_invariants() {
        let row = |tau, signal| TraceRow {
            tau_s: tau,
            sig1: 10.0,
            sig2: 5.0,
            signal,
            signal_err: None,
        };
        assert!(Trace::new(vec![row(1e-3, 0.1), row(2e-3, 0.05)]).is_ok());
        assert!(Trace::new(vec![row(2e-3, 0.1), row(1e-3, 0.05)]).is_err());
        assert!(Trace::new(vec![row(1e-3, 1.5)]).is_err());
    }
}
