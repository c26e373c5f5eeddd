//! Decision paths from classified control events.

use serde::{Deserialize, Serialize};

use crate::classify::{Band, ClassifiedEvent, ControlKind, LengthBands};
use crate::error::Error;
use crate::model::SideChannelModel;
use crate::profile::default_profiles;
use crate::script::{enumerate_paths, segments_for_path, ChoicePath, Decision, ScriptGraph, Step};
use crate::simulate::simulate_session;
use crate::trace::Trace;

/// Graphs the oracle accepts have at most this many decisions per path.
pub const ORACLE_MAX_QUESTIONS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Basis {
    Type2Observed,
    NoType2Default,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionBasis {
    pub qid: String,
    pub rule: Basis,
}

/// Event that the walk could not account for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Anomaly {
    /// Type-2 with no open question before it.
    OrphanType2 { t_us: u64 },
    /// Extra type-2 after the one that already decided `qid`.
    DuplicateType2 { qid: String, t_us: u64 },
    /// Type-1 after the walk reached a segment without a question.
    SurplusType1 { t_us: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub path: ChoicePath,
    pub basis: Vec<DecisionBasis>,
    pub anomalies: Vec<Anomaly>,
}

/// Walks the graph from the entry, one question per type-1 event.
///
/// A question is answered `Alt` when at least one type-2 event follows its
/// type-1 before the next type-1, and `Default` otherwise. Running out of
/// events ends the path early; events the walk cannot use become anomalies.
pub fn reconstruct_path(events: &[ClassifiedEvent], graph: &ScriptGraph) -> Reconstruction {
    let mut steps = Vec::new();
    let mut basis = Vec::new();
    let mut anomalies = Vec::new();
    let mut current = Some(graph.entry.as_str());

    let mut i = 0;
    while i < events.len() && events[i].kind == ControlKind::Type2 {
        anomalies.push(Anomaly::OrphanType2 { t_us: events[i].t_us });
        i += 1;
    }
    while i < events.len() {
        let marker = events[i];
        i += 1;
        let first_t2 = i;
        while i < events.len() && events[i].kind == ControlKind::Type2 {
            i += 1;
        }
        let type2s = &events[first_t2..i];

        match current.and_then(|seg| graph.choice_after(seg)) {
            Some(cp) => {
                let (taken, rule) = if type2s.is_empty() {
                    (Decision::Default, Basis::NoType2Default)
                } else {
                    (Decision::Alt, Basis::Type2Observed)
                };
                anomalies.extend(type2s.iter().skip(1).map(|e| Anomaly::DuplicateType2 {
                    qid: cp.qid.clone(),
                    t_us: e.t_us,
                }));
                steps.push(Step::new(cp.qid.clone(), taken));
                basis.push(DecisionBasis {
                    qid: cp.qid.clone(),
                    rule,
                });
                current = Some(cp.next_for(taken));
            }
            None => {
                current = None;
                anomalies.push(Anomaly::SurplusType1 { t_us: marker.t_us });
                anomalies.extend(type2s.iter().map(|e| Anomaly::OrphanType2 { t_us: e.t_us }));
            }
        }
    }

    Reconstruction {
        path: ChoicePath::new(steps),
        basis,
        anomalies,
    }
}

/// Share of events the walk used cleanly: `1 - anomalies / max(1, events)`.
/// A path the graph cannot play counts as one more anomaly.
pub fn consistency_score(reconstruction: &Reconstruction, events: &[ClassifiedEvent], graph: &ScriptGraph) -> f64 {
    let mut anomalies = reconstruction.anomalies.len();
    if segments_for_path(graph, &reconstruction.path).is_err() {
        anomalies += 1;
    }
    (1.0 - anomalies as f64 / events.len().max(1) as f64).clamp(0.0, 1.0)
}

/// Serialized form: `{"path","basis","anomalies","score"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub path: ChoicePath,
    pub basis: Vec<DecisionBasis>,
    pub anomalies: Vec<Anomaly>,
    pub score: f64,
}

impl ReconstructionReport {
    pub fn new(reconstruction: Reconstruction, events: &[ClassifiedEvent], graph: &ScriptGraph) -> Self {
        let score = consistency_score(&reconstruction, events, graph);
        Self {
            path: reconstruction.path,
            basis: reconstruction.basis,
            anomalies: reconstruction.anomalies,
            score,
        }
    }
}

/// Brute-force reference: every enumerable path simulated without jitter or
/// noise, reduced to its control-record signature.
///
/// A signature is the time-ordered list of control kinds, read as a multiset
/// of `(position, kind)` pairs. An observed trace is matched to the path with
/// the smallest symmetric difference; ties go to the path enumerated first,
/// which is the lexicographically smallest with `Default < Alt`.
#[derive(Debug, Clone)]
pub struct OracleIndex {
    bands: LengthBands,
    candidates: Vec<(ChoicePath, Vec<ControlKind>)>,
}

impl OracleIndex {
    pub fn build(graph: &ScriptGraph, model: &SideChannelModel) -> Result<Self, Error> {
        let bands = model_bands(model)?;
        let quiet = model.noiseless();
        let profile = &default_profiles()[0];
        let candidates = enumerate_paths(graph, ORACLE_MAX_QUESTIONS)?
            .into_iter()
            .map(|p| {
                let (trace, _) = simulate_session(graph, &p, profile, &quiet, 0)?;
                let sig = signature(&trace, &bands);
                Ok((p, sig))
            })
            .collect::<Result<Vec<_>, Error>>()?;
        Ok(Self { bands, candidates })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn reconstruct(&self, trace: &Trace) -> ChoicePath {
        let observed = signature(trace, &self.bands);
        let mut best: Option<(usize, &ChoicePath)> = None;
        for (path, sig) in &self.candidates {
            let d = symmetric_difference(sig, &observed);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, path));
            }
        }
        best.map(|(_, p)| p.clone()).unwrap_or_default()
    }
}

/// One-shot form of [`OracleIndex`]. Build the index once when matching many
/// traces against the same graph.
pub fn oracle_reconstruct(trace: &Trace, graph: &ScriptGraph, model: &SideChannelModel) -> Result<ChoicePath, Error> {
    Ok(OracleIndex::build(graph, model)?.reconstruct(trace))
}

/// The model's own length supports used as bands.
fn model_bands(model: &SideChannelModel) -> Result<LengthBands, Error> {
    let (a, b) = model.type1_len.support();
    let (c, d) = model.type2_len.support();
    Ok(LengthBands::new(Band::new(a, b)?, Band::new(c, d)?)?)
}

fn signature(trace: &Trace, bands: &LengthBands) -> Vec<ControlKind> {
    trace.client_data().filter_map(|r| bands.kind_of(r.len)).collect()
}

fn symmetric_difference(a: &[ControlKind], b: &[ControlKind]) -> usize {
    let common = a.len().min(b.len());
    let mismatched = a.iter().zip(b).filter(|(x, y)| x != y).count();
    2 * mismatched + (a.len() - common) + (b.len() - common)
}
