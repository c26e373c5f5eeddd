//! Length-band classification of client records into control events.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simulate::{EventKind, GroundTruthLog};
use crate::trace::Trace;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClassifyError {
    #[error("calibration needs at least one type-1 and one type-2 sample (got {type1} and {type2})")]
    InsufficientLabels { type1: usize, type2: usize },
    #[error("type-1 band {type1} and type-2 band {type2} overlap even after percentile trimming")]
    InseparableBands { type1: Band, type2: Band },
    #[error("invalid bands: {0}")]
    InvalidBands(String),
}

/// Closed interval of record lengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u16; 2]", into = "[u16; 2]")]
pub struct Band {
    pub lo: u16,
    pub hi: u16,
}

impl Band {
    pub fn new(lo: u16, hi: u16) -> Result<Self, ClassifyError> {
        if lo > hi {
            return Err(ClassifyError::InvalidBands(format!("empty band [{lo},{hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, len: u16) -> bool {
        (self.lo..=self.hi).contains(&len)
    }

    pub fn overlaps(&self, other: &Band) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }
}

impl TryFrom<[u16; 2]> for Band {
    type Error = ClassifyError;
    fn try_from([lo, hi]: [u16; 2]) -> Result<Self, Self::Error> {
        Band::new(lo, hi)
    }
}

impl From<Band> for [u16; 2] {
    fn from(b: Band) -> Self {
        [b.lo, b.hi]
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.lo, self.hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawBands")]
pub struct LengthBands {
    pub type1: Band,
    pub type2: Band,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBands {
    type1: Band,
    type2: Band,
}

impl TryFrom<RawBands> for LengthBands {
    type Error = ClassifyError;
    fn try_from(raw: RawBands) -> Result<Self, Self::Error> {
        LengthBands::new(raw.type1, raw.type2)
    }
}

impl LengthBands {
    pub fn new(type1: Band, type2: Band) -> Result<Self, ClassifyError> {
        if type1.overlaps(&type2) {
            return Err(ClassifyError::InvalidBands(format!("{type1} overlaps {type2}")));
        }
        Ok(Self { type1, type2 })
    }

    pub fn kind_of(&self, len: u16) -> Option<ControlKind> {
        if self.type1.contains(len) {
            Some(ControlKind::Type1)
        } else if self.type2.contains(len) {
            Some(ControlKind::Type2)
        } else {
            None
        }
    }

    pub fn as_array(&self) -> [Band; 2] {
        [self.type1, self.type2]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("bands serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ControlKind {
    Type1,
    Type2,
}

impl ControlKind {
    pub fn index(self) -> usize {
        match self {
            ControlKind::Type1 => 0,
            ControlKind::Type2 => 1,
        }
    }

    pub fn from_event(kind: EventKind) -> Option<Self> {
        match kind {
            EventKind::Type1 => Some(ControlKind::Type1),
            EventKind::Type2 => Some(ControlKind::Type2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifiedEvent {
    pub t_us: u64,
    pub kind: ControlKind,
    pub len: u16,
}

/// Lengths of the client records that carried each labelled control event.
///
/// A labelled event is matched to every client application-data record at
/// its timestamp, so a record split into parts contributes all parts.
pub fn labelled_samples(labelled: &[(Trace, GroundTruthLog)]) -> [Vec<u16>; 2] {
    let mut out = [Vec::new(), Vec::new()];
    for (trace, truth) in labelled {
        let mut by_time: BTreeMap<u64, Vec<u16>> = BTreeMap::new();
        for r in trace.client_data() {
            by_time.entry(r.t_us).or_default().push(r.len);
        }
        for e in truth.control_events() {
            let kind = ControlKind::from_event(e.kind).expect("control event");
            if let Some(lens) = by_time.get(&e.t_us) {
                out[kind.index()].extend(lens);
            }
        }
    }
    out
}

/// Fits one band per control kind from labelled sessions.
///
/// Each band spans the observed lengths widened by one on both sides. If the
/// two bands overlap they are both cut back to the 1st..99th percentile of
/// their samples; if that still overlaps the side channel is closed.
pub fn calibrate_bands(labelled: &[(Trace, GroundTruthLog)]) -> Result<LengthBands, ClassifyError> {
    let [mut t1, mut t2] = labelled_samples(labelled);
    calibrate_from_samples(&mut t1, &mut t2)
}

pub fn calibrate_from_samples(type1: &mut [u16], type2: &mut [u16]) -> Result<LengthBands, ClassifyError> {
    if type1.is_empty() || type2.is_empty() {
        return Err(ClassifyError::InsufficientLabels {
            type1: type1.len(),
            type2: type2.len(),
        });
    }
    type1.sort_unstable();
    type2.sort_unstable();
    let widen = |s: &[u16]| Band {
        lo: s[0].saturating_sub(1),
        hi: s[s.len() - 1].saturating_add(1),
    };
    let (b1, b2) = (widen(type1), widen(type2));
    if !b1.overlaps(&b2) {
        return Ok(LengthBands { type1: b1, type2: b2 });
    }
    let trim = |s: &[u16]| Band {
        lo: percentile(s, 1.0),
        hi: percentile(s, 99.0),
    };
    let (b1, b2) = (trim(type1), trim(type2));
    if b1.overlaps(&b2) {
        return Err(ClassifyError::InseparableBands { type1: b1, type2: b2 });
    }
    Ok(LengthBands { type1: b1, type2: b2 })
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[u16], p: f64) -> u16 {
    let rank = (p / 100.0 * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Client application-data records whose length falls in a band, in time order.
pub fn classify_events(trace: &Trace, bands: &LengthBands) -> Vec<ClassifiedEvent> {
    trace
        .client_data()
        .filter_map(|r| {
            bands.kind_of(r.len).map(|kind| ClassifiedEvent {
                t_us: r.t_us,
                kind,
                len: r.len,
            })
        })
        .collect()
}

/// Counts of client application-data lengths, keyed by bin lower bound.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: u32,
    pub bins: BTreeMap<u32, u64>,
}

impl Histogram {
    pub fn new(bin_width: u32) -> Self {
        Self {
            bin_width,
            bins: BTreeMap::new(),
        }
    }

    pub fn total(&self) -> u64 {
        self.bins.values().sum()
    }

    pub fn merge(&mut self, other: &Histogram) {
        assert_eq!(self.bin_width, other.bin_width, "bin widths differ");
        for (&bin, &n) in &other.bins {
            *self.bins.entry(bin).or_default() += n;
        }
    }

    /// Bin with the most records inside `lo..=hi`.
    pub fn mode_within(&self, lo: u32, hi: u32) -> Option<u32> {
        self.bins
            .range(lo..=hi)
            .max_by_key(|&(&bin, &n)| (n, std::cmp::Reverse(bin)))
            .map(|(&bin, _)| bin)
    }

    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "bin,count")?;
        for (bin, n) in &self.bins {
            writeln!(w, "{bin},{n}")?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("vec write");
        String::from_utf8(buf).expect("ascii")
    }
}

pub fn length_histogram(trace: &Trace, bin_width: u32) -> Histogram {
    assert!(bin_width >= 1, "bin width must be positive");
    let mut h = Histogram {
        bin_width,
        bins: BTreeMap::new(),
    };
    for r in trace.client_data() {
        *h.bins.entry(r.len as u32 / bin_width * bin_width).or_default() += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SideChannelModel;
    use crate::profile::default_profiles;
    use crate::script::ChoicePath;
    use crate::simulate::{simulate_session, TruthEvent};
    use crate::trace::{Origin, TlsRecord, TraceMeta};
    use proptest::prelude::*;

    fn trace(lens: &[u16]) -> Trace {
        let recs = lens
            .iter()
            .enumerate()
            .map(|(i, &l)| TlsRecord::client_data(i as u64 * 10, l))
            .collect();
        Trace::new(TraceMeta::new("t", Origin::Synthetic, None), recs)
    }

    fn labelled(t1: &[u16], t2: &[u16]) -> (Trace, GroundTruthLog) {
        let mut lens = t1.to_vec();
        lens.extend_from_slice(t2);
        let tr = trace(&lens);
        let events = tr
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| TruthEvent {
                t_us: r.t_us,
                kind: if i < t1.len() {
                    EventKind::Type1
                } else {
                    EventKind::Type2
                },
                qid: None,
                segment: None,
                len: r.len,
            })
            .collect();
        (
            tr,
            GroundTruthLog {
                path: ChoicePath::default(),
                events,
                windows: vec![],
            },
        )
    }

    fn bands(a: [u16; 2], b: [u16; 2]) -> LengthBands {
        LengthBands::new(a.try_into().unwrap(), b.try_into().unwrap()).unwrap()
    }

    #[test]
    fn single_samples_get_unit_margin() {
        let b = calibrate_bands(&[labelled(&[710], &[910])]).unwrap();
        assert_eq!(b, bands([709, 711], [909, 911]));
    }

    #[test]
    fn identical_lengths_are_inseparable() {
        let err = calibrate_bands(&[labelled(&[1000, 1000], &[1000])]).unwrap_err();
        assert!(matches!(err, ClassifyError::InseparableBands { .. }));
    }

    #[test]
    fn missing_kind_is_insufficient() {
        assert_eq!(
            calibrate_bands(&[labelled(&[710], &[])]).unwrap_err(),
            ClassifyError::InsufficientLabels { type1: 1, type2: 0 }
        );
    }

    #[test]
    fn percentile_trim_rescues_outliers() {
        // one stray type-1 sample inside type-2 territory
        let mut t1 = vec![710u16; 150];
        t1.push(912);
        let t2 = vec![910u16; 150];
        let b = calibrate_bands(&[labelled(&t1, &t2)]).unwrap();
        assert_eq!(b, bands([710, 710], [910, 910]));
    }

    #[test]
    fn band_membership() {
        let b = bands([709, 711], [909, 911]);
        let events = classify_events(&trace(&[450, 710, 16384, 905, 910, 709, 911]), &b);
        let kinds: Vec<_> = events.iter().map(|e| (e.kind, e.len)).collect();
        assert_eq!(
            kinds,
            vec![
                (ControlKind::Type1, 710),
                (ControlKind::Type2, 910),
                (ControlKind::Type1, 709),
                (ControlKind::Type2, 911)
            ]
        );
    }

    #[test]
    fn bands_json() {
        let b = bands([709, 711], [909, 911]);
        assert_eq!(b.to_json(), r#"{"type1":[709,711],"type2":[909,911]}"#);
        assert_eq!(serde_json::from_str::<LengthBands>(&b.to_json()).unwrap(), b);
        assert!(serde_json::from_str::<LengthBands>(r#"{"type1":[700,800],"type2":[750,900]}"#).is_err());
        assert!(serde_json::from_str::<LengthBands>(r#"{"type1":[800,700],"type2":[900,950]}"#).is_err());
    }

    #[test]
    fn histogram_floor_binning() {
        assert!(length_histogram(&trace(&[]), 10).bins.is_empty());
        let h = length_histogram(&trace(&[710, 711]), 10);
        assert_eq!(h.bins, BTreeMap::from([(710, 2)]));
        assert_eq!(h.to_csv(), "bin,count\n710,2\n");
    }

    #[test]
    fn simulated_histogram_modes() {
        let g = crate::script::ScriptGraph::chain(5, 20_000, 500);
        let mut total = Histogram {
            bin_width: 10,
            ..Default::default()
        };
        for seed in 0..10u64 {
            let path = format!("Q1=A,Q2'=A,Q3'=A,Q4'=A,Q5'={}", if seed % 2 == 0 { "A" } else { "D" });
            let (tr, _) = simulate_session(
                &g,
                &path.parse().unwrap(),
                &default_profiles()[0],
                &SideChannelModel::default(),
                seed,
            )
            .unwrap();
            total.merge(&length_histogram(&tr, 10));
        }
        let near = |bin: Option<u32>, target: u32| bin.is_some_and(|b| b.abs_diff(target) <= 10);
        assert!(near(total.mode_within(300, 600), 450));
        assert!(near(total.mode_within(650, 800), 710));
        assert!(near(total.mode_within(850, 1000), 910));
    }

    proptest! {
        #[test]
        fn calibration_never_returns_overlap(
            t1 in prop::collection::vec(1u16..3000, 1..50),
            t2 in prop::collection::vec(1u16..3000, 1..50),
        ) {
            match calibrate_from_samples(&mut t1.clone(), &mut t2.clone()) {
                Ok(b) => {
                    prop_assert!(!b.type1.overlaps(&b.type2));
                    prop_assert!(b.type1.lo <= b.type1.hi && b.type2.lo <= b.type2.hi);
                }
                Err(e) => prop_assert!(matches!(e, ClassifyError::InseparableBands { .. }), "unexpected error {:?}", e),
            }
        }

        #[test]
        fn histogram_counts_every_client_record(lens in prop::collection::vec(0u16..=16384, 0..100), w in 1u32..500) {
            let h = length_histogram(&trace(&lens), w);
            prop_assert_eq!(h.total(), lens.len() as u64);
        }
    }
}
