//! Synthetic corpora, end-to-end accuracy metrics and report files.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{calibrate_bands, classify_events, length_histogram, ControlKind, Histogram, LengthBands};
use crate::error::Error;
use crate::model::{model_for_profile, SideChannelModel};
use crate::profile::{default_profiles, OperationalProfile};
use crate::reconstruct::reconstruct_path;
use crate::script::{enumerate_paths, load_script, ScriptGraph};
use crate::simulate::{simulate_session, GroundTruthLog};
use crate::trace::{read_trace, write_trace, Trace};

/// Paths for a corpus are drawn from at most this many decisions deep.
pub const CORPUS_MAX_QUESTIONS: usize = 16;
pub const DEFAULT_CALIBRATION_FRACTION: f64 = 0.1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("{0}")]
    Validation(String),
    #[error("{entries} entries cannot be split into {calibration} for calibration and at least one for evaluation")]
    EmptySplit { entries: usize, calibration: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub trace_path: String,
    pub truth_path: String,
    pub profile: OperationalProfile,
}

/// Index of a corpus on disk. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub script: String,
    pub count: usize,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut m: DatasetManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::json(format!("parsing {}", path.display()), e))?;
        if m.count != m.entries.len() {
            return Err(EvalError::Validation(format!(
                "manifest {} records count {} but lists {} entries",
                path.display(),
                m.count,
                m.entries.len()
            ))
            .into());
        }
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn load_script(&self) -> Result<ScriptGraph, Error> {
        let path = self.resolve(&self.script);
        let bytes = fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(load_script(&bytes)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub trace: Trace,
    pub truth: GroundTruthLog,
    pub profile: OperationalProfile,
}

/// Simulates `n_sessions` sessions in memory.
///
/// Paths are drawn uniformly from the enumerated paths, profiles cycle
/// through the defaults, and each session's model is `model` adjusted to
/// its profile. The result depends only on the arguments.
pub fn generate_sessions(
    graph: &ScriptGraph,
    n_sessions: usize,
    seed: u64,
    model: &SideChannelModel,
) -> Result<Vec<Session>, Error> {
    if n_sessions == 0 {
        return Err(EvalError::Validation("a corpus needs at least one session".into()).into());
    }
    let paths = enumerate_paths(graph, CORPUS_MAX_QUESTIONS)?;
    let profiles = default_profiles();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan: Vec<(usize, u64)> = (0..n_sessions)
        .map(|_| (rng.random_range(0..paths.len()), rng.random()))
        .collect();
    plan.par_iter()
        .enumerate()
        .map(|(i, &(p, session_seed))| {
            let profile = profiles[i % profiles.len()].clone();
            let m = model_for_profile(&profile, model);
            let (trace, truth) = simulate_session(graph, &paths[p], &profile, &m, session_seed)?;
            Ok(Session { trace, truth, profile })
        })
        .collect()
}

/// Writes a corpus under `out_dir`: `script.json`, `traces/`, `truth/` and
/// `manifest.json`.
pub fn build_corpus(
    graph: &ScriptGraph,
    n_sessions: usize,
    seed: u64,
    model: &SideChannelModel,
    out_dir: &Path,
) -> Result<DatasetManifest, Error> {
    let sessions = generate_sessions(graph, n_sessions, seed, model)?;
    for sub in ["traces", "truth"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    write_file(&out_dir.join("script.json"), graph.to_json().as_bytes())?;
    let mut entries = Vec::with_capacity(sessions.len());
    for (i, s) in sessions.iter().enumerate() {
        let trace_path = format!("traces/session-{i:04}.jsonl");
        let truth_path = format!("truth/session-{i:04}.json");
        write_file(&out_dir.join(&trace_path), &write_trace(&s.trace))?;
        write_file(&out_dir.join(&truth_path), s.truth.to_json().as_bytes())?;
        entries.push(ManifestEntry {
            trace_path,
            truth_path,
            profile: s.profile.clone(),
        });
    }
    let manifest = DatasetManifest {
        name: format!("synthetic-{seed}"),
        script: "script.json".into(),
        count: entries.len(),
        entries,
        base_dir: out_dir.to_path_buf(),
    };
    write_file(&out_dir.join("manifest.json"), manifest.to_json().as_bytes())?;
    Ok(manifest)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_sessions(manifest: &DatasetManifest) -> Result<Vec<(Trace, GroundTruthLog)>, Error> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let tp = manifest.resolve(&e.trace_path);
            let f = fs::File::open(&tp).map_err(|err| Error::io(format!("opening {}", tp.display()), err))?;
            let trace = read_trace(BufReader::new(f))?;
            let gp = manifest.resolve(&e.truth_path);
            let bytes = fs::read(&gp).map_err(|err| Error::io(format!("reading {}", gp.display()), err))?;
            let truth =
                serde_json::from_slice(&bytes).map_err(|err| Error::json(format!("parsing {}", gp.display()), err))?;
            Ok((trace, truth))
        })
        .collect()
}

/// Sessions used for calibration: `ceil(fraction * n)`, leaving at least one
/// for evaluation.
pub fn calibration_count(n: usize, fraction: f64) -> Result<usize, EvalError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(EvalError::Validation(format!(
            "calibration fraction {fraction} must lie in (0,1)"
        )));
    }
    let k = (fraction * n as f64).ceil() as usize;
    if k == 0 || k >= n {
        return Err(EvalError::EmptySplit {
            entries: n,
            calibration: k,
        });
    }
    Ok(k)
}

/// Totals kept alongside the rates in [`Metrics`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub calibration_sessions: u64,
    pub evaluation_sessions: u64,
    /// Ground-truth control events in the evaluation split.
    pub truth_events: u64,
    /// Truth events with a classified event at the same record.
    pub matched_events: u64,
    /// Matched events classified as the right kind.
    pub correct_events: u64,
    /// Classified events with no truth event behind them.
    pub spurious_events: u64,
    pub decisions: u64,
    pub correct_decisions: u64,
    pub exact_paths: u64,
}

impl Counts {
    fn merge(mut self, o: Counts) -> Counts {
        self.calibration_sessions += o.calibration_sessions;
        self.evaluation_sessions += o.evaluation_sessions;
        self.truth_events += o.truth_events;
        self.matched_events += o.matched_events;
        self.correct_events += o.correct_events;
        self.spurious_events += o.spurious_events;
        self.decisions += o.decisions;
        self.correct_decisions += o.correct_decisions;
        self.exact_paths += o.exact_paths;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_event_accuracy: f64,
    pub per_choice_accuracy: f64,
    pub path_exact_rate: f64,
    /// Rows are the true kind, columns the classified kind (type-1 first).
    pub confusion: [[u64; 2]; 2],
    pub counts: Counts,
}

impl Metrics {
    fn from_tally(t: Tally) -> Self {
        let rate = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        let c = t.counts;
        Self {
            per_event_accuracy: rate(c.correct_events, c.truth_events),
            per_choice_accuracy: rate(c.correct_decisions, c.decisions),
            path_exact_rate: rate(c.exact_paths, c.evaluation_sessions),
            confusion: t.confusion,
            counts: c,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn confusion_csv(&self) -> String {
        let [[a, b], [c, d]] = self.confusion;
        format!("truth,classified_type1,classified_type2\ntype1,{a},{b}\ntype2,{c},{d}\n")
    }
}

#[derive(Debug, Clone, Default)]
struct Tally {
    counts: Counts,
    confusion: [[u64; 2]; 2],
}

impl Tally {
    fn merge(mut self, o: Tally) -> Tally {
        for i in 0..2 {
            for j in 0..2 {
                self.confusion[i][j] += o.confusion[i][j];
            }
        }
        self.counts = self.counts.merge(o.counts);
        self
    }
}

/// Scores one session. Truth control events are paired with classified
/// events that sit on the same client record (same timestamp).
fn score_session(graph: &ScriptGraph, trace: &Trace, truth: &GroundTruthLog, bands: &LengthBands) -> Tally {
    let events = classify_events(trace, bands);
    let mut by_time: BTreeMap<u64, ControlKind> = events.iter().map(|e| (e.t_us, e.kind)).collect();
    let mut t = Tally::default();
    t.counts.evaluation_sessions = 1;
    for e in truth.control_events() {
        let want = ControlKind::from_event(e.kind).expect("control event");
        t.counts.truth_events += 1;
        if let Some(got) = by_time.remove(&e.t_us) {
            t.counts.matched_events += 1;
            t.confusion[want.index()][got.index()] += 1;
            if got == want {
                t.counts.correct_events += 1;
            }
        }
    }
    t.counts.spurious_events = by_time.len() as u64;

    let recon = reconstruct_path(&events, graph);
    let truth_steps = &truth.path.decisions;
    t.counts.decisions = truth_steps.len() as u64;
    t.counts.correct_decisions = truth_steps
        .iter()
        .enumerate()
        .filter(|(i, s)| recon.path.decisions.get(*i) == Some(s))
        .count() as u64;
    t.counts.exact_paths = u64::from(recon.path == truth.path);
    t
}

/// Calibrates on the first `ceil(fraction * n)` sessions and scores the rest.
/// `bands` skips calibration and uses the given bands instead; the split is
/// the same either way.
pub fn evaluate_sessions(
    graph: &ScriptGraph,
    sessions: &[(Trace, GroundTruthLog)],
    calibration_fraction: f64,
    bands: Option<LengthBands>,
) -> Result<Metrics, Error> {
    let k = calibration_count(sessions.len(), calibration_fraction)?;
    let (cal, test) = sessions.split_at(k);
    let bands = match bands {
        Some(b) => b,
        None => calibrate_bands(cal)?,
    };
    let mut tally = test
        .par_iter()
        .map(|(trace, truth)| score_session(graph, trace, truth, &bands))
        .reduce(Tally::default, Tally::merge);
    tally.counts.calibration_sessions = k as u64;
    Ok(Metrics::from_tally(tally))
}

/// Full pipeline over a corpus on disk.
pub fn evaluate_pipeline(manifest: &DatasetManifest, calibration_fraction: f64) -> Result<Metrics, Error> {
    let graph = manifest.load_script()?;
    let sessions = load_sessions(manifest)?;
    evaluate_sessions(&graph, &sessions, calibration_fraction, None)
}

/// Bands fitted on the calibration split of a corpus.
pub fn calibrate_manifest(manifest: &DatasetManifest, calibration_fraction: f64) -> Result<LengthBands, Error> {
    let sessions = load_sessions(manifest)?;
    let k = calibration_count(sessions.len(), calibration_fraction)?;
    Ok(calibrate_bands(&sessions[..k])?)
}

/// One merged length histogram per distinct profile, ordered by slug.
/// Traces without a profile are skipped.
pub fn profile_histograms(traces: &[&Trace], bin_width: u32) -> Vec<(OperationalProfile, Histogram)> {
    let mut by_slug: BTreeMap<String, (OperationalProfile, Histogram)> = BTreeMap::new();
    for t in traces {
        let Some(p) = &t.meta.profile else { continue };
        let entry = by_slug
            .entry(p.slug())
            .or_insert_with(|| (p.clone(), Histogram::new(bin_width)));
        entry.1.merge(&length_histogram(t, bin_width));
    }
    by_slug.into_values().collect()
}

/// Writes `metrics.json`, `confusion.csv` and one `hist_<profile>.csv` per
/// histogram into `dest`. Returns the files written.
pub fn emit_report(
    metrics: &Metrics,
    histograms: &[(OperationalProfile, Histogram)],
    dest: &Path,
) -> Result<Vec<PathBuf>, Error> {
    fs::create_dir_all(dest).map_err(|e| Error::io(format!("creating {}", dest.display()), e))?;
    let mut written = Vec::new();
    let mut put = |name: String, bytes: &[u8]| -> Result<(), Error> {
        let path = dest.join(name);
        write_file(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    put("metrics.json".into(), metrics.to_json().as_bytes())?;
    put("confusion.csv".into(), metrics.confusion_csv().as_bytes())?;
    for (profile, hist) in histograms {
        put(format!("hist_{}.csv", profile.slug()), hist.to_csv().as_bytes())?;
    }
    Ok(written)
}
