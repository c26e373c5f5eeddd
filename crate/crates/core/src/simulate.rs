//! Synthetic viewing sessions with ground truth.
//!
//! The stream is check-pointed at every question. Chunks of the current
//! segment are requested at the chunk cadence; when the segment ends the
//! client sends a type-1 control record and a choice window opens. During the
//! window the player prefetches the first chunks of the default branch,
//! evenly spread over the window. Picking the default (or letting the window
//! lapse) plays the default branch once the window closes, skipping the
//! prefetched chunks. Picking the alternate sends a type-2 record at the
//! decision instant, cancels the remaining prefetches and starts requesting
//! the alternate branch right away. Background client records arrive as a
//! Poisson process over the whole session; every chunk request is answered by
//! a bulk server record.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::SideChannelModel;
use crate::profile::OperationalProfile;
use crate::script::{segments_for_path, ChoicePath, Decision, ScriptError, ScriptGraph};
use crate::trace::{Origin, TlsRecord, Trace, TraceMeta, MAX_RECORD_LEN};

/// Server answer delay after a chunk request.
pub const SERVER_DELAY_US: u64 = 40_000;
/// Delay between a type-2 record and the first alternate-branch request.
pub const ALT_START_DELAY_US: u64 = 1_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error("invalid side-channel model: {0}")]
    BadModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    Type1,
    Type2,
    ChunkReq,
    Noise,
}

impl EventKind {
    pub fn is_control(self) -> bool {
        matches!(self, EventKind::Type1 | EventKind::Type2)
    }
}

/// One client record the simulator emitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthEvent {
    pub t_us: u64,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qid: Option<String>,
    /// Segment a chunk request belongs to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment: Option<String>,
    pub len: u16,
}

/// Nominal choice window of one encountered question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceWindow {
    pub qid: String,
    pub start_us: u64,
    pub end_us: u64,
}

impl ChoiceWindow {
    pub fn overlaps(&self, start_us: u64, end_us: u64) -> bool {
        start_us < self.end_us && end_us > self.start_us
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthLog {
    pub path: ChoicePath,
    pub events: Vec<TruthEvent>,
    #[serde(default)]
    pub windows: Vec<ChoiceWindow>,
}

impl GroundTruthLog {
    pub fn control_events(&self) -> impl Iterator<Item = &TruthEvent> + '_ {
        self.events.iter().filter(|e| e.kind.is_control())
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("ground truth serializes")
    }
}

struct Timeline<'m> {
    model: &'m SideChannelModel,
    rng: ChaCha8Rng,
    events: Vec<TruthEvent>,
}

impl Timeline<'_> {
    fn push(&mut self, t_us: u64, kind: EventKind, qid: Option<&str>, segment: Option<&str>) {
        let dist = match kind {
            EventKind::Type1 => self.model.type1_len,
            EventKind::Type2 => self.model.type2_len,
            EventKind::ChunkReq => self.model.chunk_req_len,
            EventKind::Noise => self.model.noise_len,
        };
        let len = dist.sample(&mut self.rng);
        self.events.push(TruthEvent {
            t_us,
            kind,
            qid: qid.map(str::to_string),
            segment: segment.map(str::to_string),
            len,
        });
    }
}

/// Runs one session along `path`. Output depends only on the arguments.
pub fn simulate_session(
    graph: &ScriptGraph,
    path: &ChoicePath,
    profile: &OperationalProfile,
    model: &SideChannelModel,
    seed: u64,
) -> Result<(Trace, GroundTruthLog), SimError> {
    model.validate().map_err(SimError::BadModel)?;
    let segments = segments_for_path(graph, path)?;
    let mut tl = Timeline {
        model,
        rng: ChaCha8Rng::seed_from_u64(seed),
        events: Vec::new(),
    };
    let mut windows = Vec::new();

    // playback start of the current segment, and chunks of it already fetched
    let mut start_us = 0u64;
    let mut prefetched = 0u64;
    let mut session_end = 0u64;
    for (i, seg_id) in segments.iter().enumerate() {
        let seg = graph.segment(seg_id).expect("path segments exist");
        let chunk_us = seg.chunk_ms * 1000;
        for k in prefetched..seg.chunk_count() {
            tl.push(start_us + k * chunk_us, EventKind::ChunkReq, None, Some(seg_id));
        }
        let seg_end = start_us + seg.duration_ms * 1000;
        session_end = seg_end;

        let Some(step) = path.decisions.get(i) else {
            break;
        };
        let cp = graph.choice_after(seg_id).expect("consistent path has a choice here");
        let window_us = cp.window_ms * 1000;
        tl.push(seg_end, EventKind::Type1, Some(&cp.qid), None);
        windows.push(ChoiceWindow {
            qid: cp.qid.clone(),
            start_us: seg_end,
            end_us: seg_end + window_us,
        });

        let decide_at = seg_end + tl.rng.random_range(window_us / 10..=window_us * 9 / 10);
        let default_seg = graph.segment(&cp.default_next).expect("valid graph");
        let n_prefetch = (model.prefetch_chunks as u64).min(default_seg.chunk_count());
        let spacing = window_us / (n_prefetch + 1);
        let prefetch_times = (1..=n_prefetch).map(|j| seg_end + j * spacing);

        match step.taken {
            Decision::Default => {
                for t in prefetch_times {
                    tl.push(t, EventKind::ChunkReq, None, Some(&cp.default_next));
                }
                start_us = seg_end + window_us;
                prefetched = n_prefetch;
            }
            Decision::Alt => {
                for t in prefetch_times.take_while(|&t| t < decide_at) {
                    tl.push(t, EventKind::ChunkReq, None, Some(&cp.default_next));
                }
                tl.push(decide_at, EventKind::Type2, Some(&cp.qid), None);
                start_us = decide_at + ALT_START_DELAY_US;
                prefetched = 0;
            }
        }
        session_end = start_us;
    }

    if model.noise_rate_hz > 0.0 {
        let gaps = Exp::new(model.noise_rate_hz).expect("positive rate");
        let mut t = 0.0f64;
        loop {
            t += gaps.sample(&mut tl.rng) * 1e6;
            if t >= session_end as f64 {
                break;
            }
            tl.push(t as u64, EventKind::Noise, None, None);
        }
    }

    let mut events = tl.events;
    separate_from_control(&mut events);
    events.sort_by_key(|e| e.t_us);

    let mut records: Vec<TlsRecord> = events.iter().map(|e| TlsRecord::client_data(e.t_us, e.len)).collect();
    records.extend(
        events
            .iter()
            .filter(|e| e.kind == EventKind::ChunkReq)
            .map(|e| TlsRecord::server_data(e.t_us + SERVER_DELAY_US, MAX_RECORD_LEN)),
    );
    let meta = TraceMeta::new(format!("sim-{seed:016x}"), Origin::Synthetic, Some(profile.clone()));
    let trace = Trace::from_unsorted(meta, records);
    let truth = GroundTruthLog {
        path: path.clone(),
        events,
        windows,
    };
    Ok((trace, truth))
}

/// Moves non-control records off the exact microsecond of a control record,
/// so each control record is identified by its timestamp alone.
fn separate_from_control(events: &mut [TruthEvent]) {
    let control: HashSet<u64> = events.iter().filter(|e| e.kind.is_control()).map(|e| e.t_us).collect();
    for e in events.iter_mut().filter(|e| !e.kind.is_control()) {
        while control.contains(&e.t_us) {
            e.t_us += 1;
        }
    }
}
