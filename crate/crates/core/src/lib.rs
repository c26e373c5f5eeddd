//! Choice-path inference for interactive streaming video.
//!
//! Interactive titles are streamed segment by segment. When a question comes
//! up the player sends a small control record, and it sends a second, longer
//! one only if the viewer picks the non-default branch. Both are encrypted,
//! but their TLS record lengths are visible on the wire, and that is enough to
//! recover every decision the viewer made.
//!
//! The crate covers the whole pipeline:
//!
//! - [`script`]: branching script graphs, path enumeration.
//! - [`pcap`], [`tls`], [`ingest`], [`trace`]: captures to a canonical trace of
//!   TLS records, and the JSONL trace format.
//! - [`profile`], [`model`], [`simulate`]: seeded synthetic sessions with
//!   ground truth.
//! - [`classify`]: length bands and control-event classification.
//! - [`reconstruct`]: decision paths from classified events, plus a
//!   brute-force oracle.
//! - [`defense`]: padding, splitting and compression transforms and a timing
//!   probe for what they leave behind.
//! - [`eval`]: corpora, metrics and reports.

pub mod classify;
pub mod defense;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod model;
pub mod pcap;
pub mod profile;
pub mod reconstruct;
pub mod script;
pub mod simulate;
pub mod tls;
pub mod trace;

pub use classify::{
    calibrate_bands, classify_events, length_histogram, Band, ClassifiedEvent, ControlKind, LengthBands,
};
pub use error::Error;
pub use model::{model_for_profile, LengthDist, SideChannelModel};
pub use profile::{default_profiles, OperationalProfile};
pub use reconstruct::{consistency_score, oracle_reconstruct, reconstruct_path, Reconstruction};
pub use script::{enumerate_paths, load_script, segments_for_path, validate_graph, ChoicePath, Decision, ScriptGraph};
pub use simulate::{simulate_session, EventKind, GroundTruthLog};
pub use trace::{client_record_lengths, read_trace, write_trace, Direction, TlsRecord, Trace};
