//! Length-hiding transforms for control records and a timing probe.
//!
//! Transforms rewrite a trace as a patched client would have sent it. Only
//! client application-data records inside the protected bands change; every
//! other record is left untouched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{calibrate_bands, Band, ClassifyError, LengthBands};
use crate::error::Error;
use crate::eval::{evaluate_sessions, load_sessions, DatasetManifest, Metrics};
use crate::simulate::GroundTruthLog;
use crate::trace::{TlsRecord, Trace, MAX_RECORD_LEN};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DefenseError {
    #[error("bad defense policy: {0}")]
    BadPolicy(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Transform {
    PadFixed { pad_to: u16 },
    PadBuckets { buckets: Vec<u16> },
    Split { split_unit: u16 },
    Compress { compress_ratio_range: [f64; 2] },
}

/// A transform plus the seed for its randomness (only `Compress` uses it).
///
/// JSON form: `{"kind":"Split","split_unit":400,"seed":0}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefensePolicy {
    #[serde(flatten)]
    pub transform: Transform,
    #[serde(default)]
    pub seed: u64,
}

impl DefensePolicy {
    pub fn new(transform: Transform) -> Self {
        Self { transform, seed: 0 }
    }

    pub fn pad_fixed(pad_to: u16) -> Self {
        Self::new(Transform::PadFixed { pad_to })
    }

    pub fn split(split_unit: u16) -> Self {
        Self::new(Transform::Split { split_unit })
    }

    pub fn validate(&self) -> Result<(), DefenseError> {
        let bad = |m: String| Err(DefenseError::BadPolicy(m));
        match &self.transform {
            Transform::PadFixed { pad_to } => {
                if *pad_to == 0 || *pad_to > MAX_RECORD_LEN {
                    return bad(format!("pad_to {pad_to} outside 1..={MAX_RECORD_LEN}"));
                }
            }
            Transform::PadBuckets { buckets } => {
                if buckets.is_empty() {
                    return bad("no buckets".into());
                }
                if buckets[0] == 0 || buckets.windows(2).any(|w| w[0] >= w[1]) {
                    return bad(format!("buckets {buckets:?} must be positive and strictly ascending"));
                }
                if buckets[buckets.len() - 1] > MAX_RECORD_LEN {
                    return bad(format!("bucket above record limit {MAX_RECORD_LEN}"));
                }
            }
            Transform::Split { split_unit } => {
                if *split_unit == 0 {
                    return bad("split_unit must be positive".into());
                }
            }
            Transform::Compress {
                compress_ratio_range: [lo, hi],
            } => {
                if !(*lo > 0.0 && lo <= hi && *hi <= 1.0) {
                    return bad(format!(
                        "compress ratio range [{lo},{hi}] must lie in (0,1] with lo <= hi"
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Rewrites the protected client records of `trace` under `policy`.
///
/// Split parts keep the timestamp of the record they came from; all other
/// timestamps are unchanged. Errors if the policy is malformed, the bands
/// overlap, or `PadFixed` would have to shrink a protected record.
pub fn apply_defense(trace: &Trace, policy: &DefensePolicy, protected: &[Band]) -> Result<Trace, DefenseError> {
    policy.validate()?;
    for (i, a) in protected.iter().enumerate() {
        if let Some(b) = protected[i + 1..].iter().find(|b| a.overlaps(b)) {
            return Err(DefenseError::BadPolicy(format!("protected bands {a} and {b} overlap")));
        }
    }
    let is_protected = |r: &TlsRecord| r.is_client_data() && protected.iter().any(|b| b.contains(r.len));

    if let Transform::PadFixed { pad_to } = policy.transform {
        if let Some(r) = trace.records.iter().find(|r| is_protected(r) && r.len > pad_to) {
            return Err(DefenseError::BadPolicy(format!(
                "pad_to {pad_to} is below protected record of length {} at {} us",
                r.len, r.t_us
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed ^ fnv1a(trace.meta.trace_id.as_bytes()));
    let mut records = Vec::with_capacity(trace.records.len());
    for r in &trace.records {
        if !is_protected(r) {
            records.push(*r);
            continue;
        }
        let with_len = |len: u16| TlsRecord { len, ..*r };
        match &policy.transform {
            Transform::PadFixed { pad_to } => records.push(with_len(*pad_to)),
            Transform::PadBuckets { buckets } => {
                let b = buckets.iter().copied().find(|&b| b >= r.len).unwrap_or(MAX_RECORD_LEN);
                records.push(with_len(b));
            }
            Transform::Split { split_unit } => {
                let mut left = r.len;
                while left > *split_unit {
                    records.push(with_len(*split_unit));
                    left -= split_unit;
                }
                if left > 0 {
                    records.push(with_len(left));
                }
            }
            Transform::Compress {
                compress_ratio_range: [lo, hi],
            } => {
                let ratio = if lo == hi { *lo } else { rng.random_range(*lo..=*hi) };
                let len = (r.len as f64 * ratio).ceil().max(1.0) as u16;
                records.push(with_len(len));
            }
        }
    }
    Ok(Trace::new(trace.meta.clone(), records))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Client record lengths treated as chunk requests.
    pub chunk_band: Band,
    /// A gap is suspicious when it exceeds this multiple of the median gap.
    pub gap_factor: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            chunk_band: Band { lo: 380, hi: 520 },
            gap_factor: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub start_us: u64,
    pub end_us: u64,
}

/// Pauses in the chunk-request stream long enough to hide a choice window.
///
/// Reports every gap between consecutive chunk-band records that exceeds
/// `gap_factor` times the median gap (lower median for even counts).
pub fn timing_probe(trace: &Trace, config: &ProbeConfig) -> Vec<Interval> {
    let times: Vec<u64> = trace
        .client_data()
        .filter(|r| config.chunk_band.contains(r.len))
        .map(|r| r.t_us)
        .collect();
    let gaps: Vec<(u64, u64)> = times.windows(2).map(|w| (w[0], w[1])).collect();
    if gaps.len() < 2 {
        return Vec::new();
    }
    let mut widths: Vec<u64> = gaps.iter().map(|(a, b)| b - a).collect();
    widths.sort_unstable();
    let median = widths[(widths.len() - 1) / 2] as f64;
    gaps.into_iter()
        .filter(|(a, b)| (b - a) as f64 > config.gap_factor * median)
        .map(|(start_us, end_us)| Interval { start_us, end_us })
        .collect()
}

/// How the attacker's recalibration fared on defended traffic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status")]
pub enum Recalibration {
    Separable { bands: LengthBands },
    InseparableBands { type1: Band, type2: Band },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionTiming {
    pub trace_id: String,
    pub windows: usize,
    /// Windows overlapped by at least one probe interval.
    pub windows_flagged: usize,
    pub intervals: Vec<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub policy: DefensePolicy,
    pub protected: LengthBands,
    pub before: Metrics,
    /// Metrics on defended traffic, classified with the recalibrated bands,
    /// or with the protected bands when recalibration is impossible.
    pub after: Metrics,
    pub recalibration: Recalibration,
    /// Share of defended sessions whose every choice window was flagged.
    pub timing_coverage: f64,
    pub sessions: Vec<SessionTiming>,
}

/// Runs the attack on a corpus before and after `policy`, with
/// `calibration_fraction` of the sessions used for calibration each time.
pub fn evaluate_defense(
    manifest: &DatasetManifest,
    policy: &DefensePolicy,
    protected: &LengthBands,
    calibration_fraction: f64,
    probe: &ProbeConfig,
) -> Result<DefenseReport, Error> {
    let graph = manifest.load_script()?;
    let sessions = load_sessions(manifest)?;
    let before = evaluate_sessions(&graph, &sessions, calibration_fraction, None)?;

    let defended = sessions
        .iter()
        .map(|(t, truth)| Ok((apply_defense(t, policy, &protected.as_array())?, truth.clone())))
        .collect::<Result<Vec<(Trace, GroundTruthLog)>, DefenseError>>()?;

    let n_cal = crate::eval::calibration_count(sessions.len(), calibration_fraction)?;
    let (recalibration, bands) = match calibrate_bands(&defended[..n_cal]) {
        Ok(bands) => (Recalibration::Separable { bands }, bands),
        Err(ClassifyError::InseparableBands { type1, type2 }) => {
            (Recalibration::InseparableBands { type1, type2 }, *protected)
        }
        Err(e) => return Err(e.into()),
    };
    let after = evaluate_sessions(&graph, &defended, calibration_fraction, Some(bands))?;

    let sessions: Vec<SessionTiming> = defended
        .iter()
        .map(|(trace, truth)| {
            let intervals = timing_probe(trace, probe);
            let windows_flagged = truth
                .windows
                .iter()
                .filter(|w| intervals.iter().any(|iv| w.overlaps(iv.start_us, iv.end_us)))
                .count();
            SessionTiming {
                trace_id: trace.meta.trace_id.clone(),
                windows: truth.windows.len(),
                windows_flagged,
                intervals,
            }
        })
        .collect();
    let covered = sessions.iter().filter(|s| s.windows_flagged == s.windows).count();
    let timing_coverage = if sessions.is_empty() {
        1.0
    } else {
        covered as f64 / sessions.len() as f64
    };

    Ok(DefenseReport {
        policy: policy.clone(),
        protected: *protected,
        before,
        after,
        recalibration,
        timing_coverage,
        sessions,
    })
}
