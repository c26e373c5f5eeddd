//! Branching script of an interactive title.
//!
//! A script is a set of segments joined by binary choice points. Each choice
//! point sits at the end of one segment and names the segment played on the
//! default branch (the one the player prefetches) and on the alternate branch.
//! Segments without a choice point are terminal.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Length of the on-screen choice window when a script does not set one.
pub const DEFAULT_WINDOW_MS: u64 = 10_000;

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("malformed script JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid script: {}", join_violations(.0))]
    Validation(Vec<Violation>),
    #[error("traversal revisits question {qid:?} beyond {max_questions} decisions")]
    DepthExceeded { qid: String, max_questions: usize },
    #[error("path inconsistent with script at decision {index}: {reason}")]
    InconsistentPath { index: usize, reason: String },
    #[error("invalid choice path syntax: {0}")]
    PathSyntax(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// One broken invariant, naming the segment or question at fault.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub entity: String,
    pub message: String,
}

impl Violation {
    fn new(entity: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            entity: entity.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.entity, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub id: String,
    pub duration_ms: u64,
    pub chunk_ms: u64,
}

impl Segment {
    pub fn new(id: impl Into<String>, duration_ms: u64, chunk_ms: u64) -> Self {
        Self {
            id: id.into(),
            duration_ms,
            chunk_ms,
        }
    }

    /// Number of chunks needed to cover the segment.
    pub fn chunk_count(&self) -> u64 {
        self.duration_ms.div_ceil(self.chunk_ms.max(1))
    }
}

fn default_window_ms() -> u64 {
    DEFAULT_WINDOW_MS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChoicePoint {
    pub qid: String,
    pub after_segment: String,
    pub default_next: String,
    pub alt_next: String,
    #[serde(default = "default_window_ms")]
    pub window_ms: u64,
}

impl ChoicePoint {
    pub fn new(
        qid: impl Into<String>,
        after_segment: impl Into<String>,
        default_next: impl Into<String>,
        alt_next: impl Into<String>,
    ) -> Self {
        Self {
            qid: qid.into(),
            after_segment: after_segment.into(),
            default_next: default_next.into(),
            alt_next: alt_next.into(),
            window_ms: DEFAULT_WINDOW_MS,
        }
    }

    pub fn next_for(&self, taken: Decision) -> &str {
        match taken {
            Decision::Default => &self.default_next,
            Decision::Alt => &self.alt_next,
        }
    }
}

/// The script as a whole. Construct through [`load_script`] or
/// [`ScriptGraph::new`] to get a validated graph; the fields stay public so
/// that broken graphs can be assembled and passed to [`validate_graph`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptGraph {
    pub entry: String,
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub choices: Vec<ChoicePoint>,
}

impl ScriptGraph {
    /// Builds a graph and rejects it if any invariant fails.
    pub fn new(
        entry: impl Into<String>,
        segments: Vec<Segment>,
        choices: Vec<ChoicePoint>,
    ) -> Result<Self, ScriptError> {
        let graph = Self {
            entry: entry.into(),
            segments,
            choices,
        };
        let violations = validate_graph(&graph);
        if violations.is_empty() {
            Ok(graph)
        } else {
            Err(ScriptError::Validation(violations))
        }
    }

    /// A chain of `questions` binary choices where both branches of every
    /// question rejoin at the next one, giving `2^questions` paths.
    ///
    /// Segment ids are `s0`, then `S{i}` / `S{i}'` for the default and
    /// alternate branch of level `i`. The question after `S{i}` is `Q{i+1}`
    /// and the one after `S{i}'` is `Q{i+1}'`.
    pub fn chain(questions: usize, segment_ms: u64, chunk_ms: u64) -> Self {
        let mut segments = vec![Segment::new("s0", segment_ms, chunk_ms)];
        let mut choices = Vec::new();
        for level in 1..=questions {
            let def = format!("S{level}");
            let alt = format!("S{level}'");
            segments.push(Segment::new(def.clone(), segment_ms, chunk_ms));
            segments.push(Segment::new(alt.clone(), segment_ms, chunk_ms));
            if level == 1 {
                choices.push(ChoicePoint::new("Q1", "s0", def, alt));
            } else {
                let prev = level - 1;
                choices.push(ChoicePoint::new(
                    format!("Q{level}"),
                    format!("S{prev}"),
                    def.clone(),
                    alt.clone(),
                ));
                choices.push(ChoicePoint::new(format!("Q{level}'"), format!("S{prev}'"), def, alt));
            }
        }
        Self {
            entry: "s0".into(),
            segments,
            choices,
        }
    }

    pub fn segment(&self, id: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.id == id)
    }

    pub fn choice_after(&self, segment: &str) -> Option<&ChoicePoint> {
        self.choices.iter().find(|c| c.after_segment == segment)
    }

    pub fn choice(&self, qid: &str) -> Option<&ChoicePoint> {
        self.choices.iter().find(|c| c.qid == qid)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script graph serializes")
    }
}

/// Parses and validates a script document.
pub fn load_script(source: &[u8]) -> Result<ScriptGraph, ScriptError> {
    let graph: ScriptGraph = serde_json::from_slice(source)?;
    let violations = validate_graph(&graph);
    if violations.is_empty() {
        Ok(graph)
    } else {
        Err(ScriptError::Validation(violations))
    }
}

/// Lists every broken invariant. An empty list means the graph is valid.
pub fn validate_graph(graph: &ScriptGraph) -> Vec<Violation> {
    let mut out = Vec::new();

    let mut seen = HashSet::new();
    for seg in &graph.segments {
        if !seen.insert(seg.id.as_str()) {
            out.push(Violation::new(&seg.id, "duplicate segment id"));
        }
        if seg.chunk_ms == 0 {
            out.push(Violation::new(&seg.id, "chunk_ms must be at least 1"));
        }
        if seg.duration_ms < seg.chunk_ms {
            out.push(Violation::new(
                &seg.id,
                format!("duration_ms {} shorter than chunk_ms {}", seg.duration_ms, seg.chunk_ms),
            ));
        }
    }

    if !seen.contains(graph.entry.as_str()) {
        out.push(Violation::new(&graph.entry, "entry segment does not exist"));
    }

    let mut qids = HashSet::new();
    let mut owners: HashMap<&str, &str> = HashMap::new();
    for c in &graph.choices {
        if !qids.insert(c.qid.as_str()) {
            out.push(Violation::new(&c.qid, "duplicate question id"));
        }
        for (role, target) in [
            ("after_segment", &c.after_segment),
            ("default_next", &c.default_next),
            ("alt_next", &c.alt_next),
        ] {
            if !seen.contains(target.as_str()) {
                out.push(Violation::new(
                    &c.qid,
                    format!("{role} refers to missing segment {target:?}"),
                ));
            }
        }
        if c.default_next == c.alt_next {
            out.push(Violation::new(&c.qid, "default_next and alt_next are the same segment"));
        }
        if c.default_next == c.after_segment || c.alt_next == c.after_segment {
            out.push(Violation::new(&c.qid, "branch loops back to its own segment"));
        }
        if c.window_ms == 0 {
            out.push(Violation::new(&c.qid, "window_ms must be positive"));
        }
        if let Some(prev) = owners.insert(c.after_segment.as_str(), c.qid.as_str()) {
            out.push(Violation::new(
                &c.qid,
                format!("segment {:?} already has choice point {prev:?}", c.after_segment),
            ));
        }
    }

    if seen.contains(graph.entry.as_str()) {
        let reachable = reachable_from_entry(graph);
        let mut reported = HashSet::new();
        for seg in &graph.segments {
            if !reachable.contains(seg.id.as_str()) && reported.insert(seg.id.as_str()) {
                out.push(Violation::new(&seg.id, "unreachable from entry"));
            }
        }
    }

    out
}

fn reachable_from_entry(graph: &ScriptGraph) -> HashSet<&str> {
    let mut reached = HashSet::new();
    let mut queue = VecDeque::from([graph.entry.as_str()]);
    while let Some(id) = queue.pop_front() {
        if !reached.insert(id) {
            continue;
        }
        if let Some(c) = graph.choice_after(id) {
            queue.push_back(&c.default_next);
            queue.push_back(&c.alt_next);
        }
    }
    reached
}

/// Which branch a viewer took. `Default` sorts before `Alt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Decision {
    Default,
    Alt,
}

impl Decision {
    pub fn short(self) -> char {
        match self {
            Decision::Default => 'D',
            Decision::Alt => 'A',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub qid: String,
    pub taken: Decision,
}

/// Orders by decision first, so paths compare with `Default < Alt` at the
/// first differing position.
impl Ord for Step {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.taken, &self.qid).cmp(&(other.taken, &other.qid))
    }
}

impl PartialOrd for Step {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Step {
    pub fn new(qid: impl Into<String>, taken: Decision) -> Self {
        Self { qid: qid.into(), taken }
    }
}

/// Decisions in the order the viewer met the questions.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChoicePath {
    pub decisions: Vec<Step>,
}

impl ChoicePath {
    pub fn new(decisions: Vec<Step>) -> Self {
        Self { decisions }
    }

    pub fn len(&self) -> usize {
        self.decisions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decisions.is_empty()
    }

    pub fn alt_count(&self) -> usize {
        self.decisions.iter().filter(|s| s.taken == Decision::Alt).count()
    }
}

impl fmt::Display for ChoicePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, step) in self.decisions.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}={}", step.qid, step.taken.short())?;
        }
        Ok(())
    }
}

/// Parses `Q1=D,Q2=A`. `Default`/`Alt` are accepted in place of `D`/`A`.
impl FromStr for ChoicePath {
    type Err = ScriptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(Self::default());
        }
        let mut decisions = Vec::new();
        for part in s.split(',') {
            let (qid, taken) = part
                .split_once('=')
                .ok_or_else(|| ScriptError::PathSyntax(format!("missing '=' in {part:?}")))?;
            let taken = match taken.trim() {
                "D" | "Default" => Decision::Default,
                "A" | "Alt" => Decision::Alt,
                other => {
                    return Err(ScriptError::PathSyntax(format!(
                        "unknown decision {other:?} for {qid:?}"
                    )))
                }
            };
            let qid = qid.trim();
            if qid.is_empty() {
                return Err(ScriptError::PathSyntax("empty question id".into()));
            }
            decisions.push(Step::new(qid, taken));
        }
        Ok(Self { decisions })
    }
}

/// All choice paths from the entry, in lexicographic order (`Default` first).
///
/// A walk ends at a segment without a choice point or after `max_questions`
/// decisions. Stopping at the depth bound is a plain truncation on acyclic
/// walks; a walk that has already revisited a question is a runaway cycle and
/// fails with [`ScriptError::DepthExceeded`].
pub fn enumerate_paths(graph: &ScriptGraph, max_questions: usize) -> Result<Vec<ChoicePath>, ScriptError> {
    let mut out = Vec::new();
    let mut steps = Vec::new();
    let mut visits: BTreeMap<&str, usize> = BTreeMap::new();
    walk(graph, &graph.entry, max_questions, &mut steps, &mut visits, &mut out)?;
    Ok(out)
}

fn walk<'g>(
    graph: &'g ScriptGraph,
    segment: &'g str,
    max_questions: usize,
    steps: &mut Vec<Step>,
    visits: &mut BTreeMap<&'g str, usize>,
    out: &mut Vec<ChoicePath>,
) -> Result<(), ScriptError> {
    let Some(cp) = graph.choice_after(segment) else {
        out.push(ChoicePath::new(steps.clone()));
        return Ok(());
    };
    if steps.len() >= max_questions {
        let revisited = visits.get(cp.qid.as_str()).is_some_and(|&n| n > 0) || visits.values().any(|&n| n > 1);
        if revisited {
            return Err(ScriptError::DepthExceeded {
                qid: cp.qid.clone(),
                max_questions,
            });
        }
        out.push(ChoicePath::new(steps.clone()));
        return Ok(());
    }
    *visits.entry(&cp.qid).or_default() += 1;
    for taken in [Decision::Default, Decision::Alt] {
        steps.push(Step::new(cp.qid.clone(), taken));
        walk(graph, cp.next_for(taken), max_questions, steps, visits, out)?;
        steps.pop();
    }
    *visits.get_mut(cp.qid.as_str()).expect("visited") -= 1;
    Ok(())
}

/// Segment ids played along `path`, starting with the entry.
pub fn segments_for_path(graph: &ScriptGraph, path: &ChoicePath) -> Result<Vec<String>, ScriptError> {
    let mut current = graph.entry.as_str();
    let mut out = vec![current.to_string()];
    for (index, step) in path.decisions.iter().enumerate() {
        let cp = graph
            .choice_after(current)
            .ok_or_else(|| ScriptError::InconsistentPath {
                index,
                reason: format!(
                    "segment {current:?} has no choice point but path decides {:?}",
                    step.qid
                ),
            })?;
        if cp.qid != step.qid {
            return Err(ScriptError::InconsistentPath {
                index,
                reason: format!("expected question {:?}, path has {:?}", cp.qid, step.qid),
            });
        }
        current = cp.next_for(step.taken);
        out.push(current.to_string());
    }
    Ok(out)
}

/// Question ids that can appear on some walk from the entry.
pub fn reachable_questions(graph: &ScriptGraph) -> BTreeSet<String> {
    reachable_from_entry(graph)
        .into_iter()
        .filter_map(|id| graph.choice_after(id).map(|c| c.qid.clone()))
        .collect()
}


#[cfg(test)]
mod tests {
    use super::fixtures::two_question_graph;
    use super::*;

    fn path(s: &str) -> ChoicePath {
        s.parse().unwrap()
    }

    #[test]
    fn single_segment_script() {
        let g =
            load_script(br#"{"entry":"s0","segments":[{"id":"s0","duration_ms":1000,"chunk_ms":500}],"choices":[]}"#)
                .unwrap();
        assert_eq!(g.entry, "s0");
        assert!(g.choices.is_empty());
        assert_eq!(enumerate_paths(&g, 4).unwrap(), vec![ChoicePath::default()]);
        assert_eq!(segments_for_path(&g, &ChoicePath::default()).unwrap(), vec!["s0"]);
    }

    #[test]
    fn two_question_script_loads() {
        let json = two_question_graph().to_json();
        let g = load_script(json.as_bytes()).unwrap();
        assert_eq!(g.choices.len(), 2);
        assert!(validate_graph(&g).is_empty());
        assert_eq!(g, two_question_graph());
    }

    #[test]
    fn window_defaults_to_ten_seconds() {
        let g = load_script(
            br#"{"entry":"a","segments":[
                {"id":"a","duration_ms":1000,"chunk_ms":500},
                {"id":"b","duration_ms":1000,"chunk_ms":500},
                {"id":"c","duration_ms":1000,"chunk_ms":500}],
              "choices":[{"qid":"Q","after_segment":"a","default_next":"b","alt_next":"c"}]}"#,
        )
        .unwrap();
        assert_eq!(g.choices[0].window_ms, 10_000);
    }

    #[test]
    fn dangling_reference_rejected() {
        let err = load_script(
            br#"{"entry":"s0","segments":[
                {"id":"s0","duration_ms":1000,"chunk_ms":500},
                {"id":"s1","duration_ms":1000,"chunk_ms":500}],
              "choices":[{"qid":"Q1","after_segment":"s0","default_next":"s1","alt_next":"sX"}]}"#,
        )
        .unwrap_err();
        match err {
            ScriptError::Validation(v) => assert!(v.iter().any(|v| v.message.contains("sX"))),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_is_parse_error() {
        assert!(matches!(load_script(b"{\"entry\":"), Err(ScriptError::Parse(_))));
        // k-ary choices have no representation
        let err = load_script(
            br#"{"entry":"a","segments":[{"id":"a","duration_ms":1,"chunk_ms":1}],
              "choices":[{"qid":"Q","after_segment":"a","default_next":"a","alt_next":"a","options":["x"]}]}"#,
        );
        assert!(matches!(err, Err(ScriptError::Parse(_))));
    }

    #[test]
    fn identical_branches_name_the_question() {
        let mut g = two_question_graph();
        g.choices[0].alt_next = "S1".into();
        let v = validate_graph(&g);
        assert!(v.iter().any(|v| v.entity == "Q1" && v.message.contains("same segment")));
    }

    #[test]
    fn unreachable_segment_named() {
        let mut g = two_question_graph();
        g.segments.push(Segment::new("orphan", 1000, 500));
        let v = validate_graph(&g);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].entity, "orphan");
    }

    #[test]
    fn other_violations() {
        let mut g = two_question_graph();
        g.segments.push(Segment::new("s0", 10, 20));
        g.choices.push(ChoicePoint::new("Q2", "S1", "S1", "S2"));
        g.entry = "nope".into();
        let v = validate_graph(&g);
        let text = join_violations(&v);
        for needle in [
            "duplicate segment id",
            "shorter than chunk_ms",
            "entry segment does not exist",
            "duplicate question id",
            "loops back",
            "already has choice point",
        ] {
            assert!(text.contains(needle), "missing {needle:?} in {text}");
        }
    }

    #[test]
    fn cycles_are_valid_but_depth_bounded() {
        let g = ScriptGraph::new(
            "a",
            vec![
                Segment::new("a", 1000, 500),
                Segment::new("b", 1000, 500),
                Segment::new("c", 1000, 500),
            ],
            vec![
                ChoicePoint::new("Qa", "a", "b", "c"),
                ChoicePoint::new("Qb", "b", "a", "c"),
            ],
        )
        .unwrap();
        assert!(matches!(
            enumerate_paths(&g, 6),
            Err(ScriptError::DepthExceeded { max_questions: 6, .. })
        ));
        // a bound reached before any revisit only truncates
        let paths = enumerate_paths(&g, 1).unwrap();
        assert_eq!(paths, vec![path("Qa=D"), path("Qa=A")]);
    }

    #[test]
    fn two_question_paths() {
        let g = two_question_graph();
        let paths = enumerate_paths(&g, 8).unwrap();
        assert_eq!(paths, vec![path("Q1=D,Q2=D"), path("Q1=D,Q2=A"), path("Q1=A")]);
        assert_eq!(
            segments_for_path(&g, &path("Q1=D,Q2=A")).unwrap(),
            vec!["s0", "S1", "S2'"]
        );
    }

    #[test]
    fn chain_of_two_has_four_paths() {
        let g = ScriptGraph::chain(2, 20_000, 500);
        assert!(validate_graph(&g).is_empty());
        let paths = enumerate_paths(&g, 8).unwrap();
        assert_eq!(paths.len(), 4);
        let mut sorted = paths.clone();
        sorted.sort();
        assert_eq!(paths, sorted);
        assert_eq!(paths[0], path("Q1=D,Q2=D"));
        assert_eq!(paths[3], path("Q1=A,Q2'=A"));
    }

    #[test]
    fn chain_truncates_at_bound() {
        let g = ScriptGraph::chain(4, 1000, 500);
        let paths = enumerate_paths(&g, 2).unwrap();
        assert_eq!(paths.len(), 4);
        assert!(paths.iter().all(|p| p.len() == 2));
    }

    #[test]
    fn skipping_a_question_is_inconsistent() {
        let g = two_question_graph();
        assert!(matches!(
            segments_for_path(&g, &path("Q2=A")),
            Err(ScriptError::InconsistentPath { index: 0, .. })
        ));
        assert!(matches!(
            segments_for_path(&g, &path("Q1=A,Q2=D")),
            Err(ScriptError::InconsistentPath { index: 1, .. })
        ));
    }

    #[test]
    fn path_syntax() {
        let p = path("Q1=D, Q2=Alt");
        assert_eq!(p.decisions[1], Step::new("Q2", Decision::Alt));
        assert_eq!(p.to_string(), "Q1=D,Q2=A");
        assert!("Q1".parse::<ChoicePath>().is_err());
        assert!("Q1=X".parse::<ChoicePath>().is_err());
        assert_eq!("".parse::<ChoicePath>().unwrap(), ChoicePath::default());
    }

    #[test]
    fn path_serializes_as_list() {
        let json = serde_json::to_string(&path("Q1=D,Q2=A")).unwrap();
        assert_eq!(json, r#"[{"qid":"Q1","taken":"Default"},{"qid":"Q2","taken":"Alt"}]"#);
    }
}
