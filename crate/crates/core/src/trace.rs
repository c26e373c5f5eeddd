//! Canonical trace: a time-ordered list of TLS records.
//!
//! On disk a trace is JSON Lines. The first line is the header
//! `{"trace_id","origin","profile"}`; every following line is one record
//! `{"t_us","dir","ctype","len"}` with `dir` either `"c2s"` or `"s2c"`.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profile::OperationalProfile;

/// Largest TLS plaintext fragment, and the largest length a record may carry.
pub const MAX_RECORD_LEN: u16 = 16_384;

pub const CTYPE_CHANGE_CIPHER_SPEC: u8 = 20;
pub const CTYPE_ALERT: u8 = 21;
pub const CTYPE_HANDSHAKE: u8 = 22;
pub const CTYPE_APPLICATION_DATA: u8 = 23;

pub fn is_known_content_type(ctype: u8) -> bool {
    (CTYPE_CHANGE_CIPHER_SPEC..=CTYPE_APPLICATION_DATA).contains(&ctype)
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("line {line}: t_us {t_us} precedes previous record at {prev}")]
    OrderViolation { line: usize, prev: u64, t_us: u64 },
    #[error("empty trace file (missing header)")]
    MissingHeader,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "c2s")]
    ClientToServer,
    #[serde(rename = "s2c")]
    ServerToClient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TlsRecord {
    pub t_us: u64,
    pub dir: Direction,
    pub ctype: u8,
    pub len: u16,
}

impl TlsRecord {
    pub fn new(t_us: u64, dir: Direction, ctype: u8, len: u16) -> Self {
        Self { t_us, dir, ctype, len }
    }

    pub fn client_data(t_us: u64, len: u16) -> Self {
        Self::new(t_us, Direction::ClientToServer, CTYPE_APPLICATION_DATA, len)
    }

    pub fn server_data(t_us: u64, len: u16) -> Self {
        Self::new(t_us, Direction::ServerToClient, CTYPE_APPLICATION_DATA, len)
    }

    /// Client application data, the only records the side channel looks at.
    pub fn is_client_data(&self) -> bool {
        self.dir == Direction::ClientToServer && self.ctype == CTYPE_APPLICATION_DATA
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    Captured,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceMeta {
    pub trace_id: String,
    pub origin: Origin,
    /// Unknown for captures ingested without a profile.
    pub profile: Option<OperationalProfile>,
    /// Number of TLS connections merged into this timeline (captures only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub connections: Option<u32>,
}

impl TraceMeta {
    pub fn new(trace_id: impl Into<String>, origin: Origin, profile: Option<OperationalProfile>) -> Self {
        Self {
            trace_id: trace_id.into(),
            origin,
            profile,
            connections: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub meta: TraceMeta,
    pub records: Vec<TlsRecord>,
}

impl Trace {
    pub fn new(meta: TraceMeta, records: Vec<TlsRecord>) -> Self {
        Self { meta, records }
    }

    /// Builds a trace from records in any order; ties keep their input order.
    pub fn from_unsorted(meta: TraceMeta, mut records: Vec<TlsRecord>) -> Self {
        records.sort_by_key(|r| r.t_us);
        Self { meta, records }
    }

    pub fn is_ordered(&self) -> bool {
        self.records.windows(2).all(|w| w[0].t_us <= w[1].t_us)
    }

    pub fn client_data(&self) -> impl Iterator<Item = &TlsRecord> + '_ {
        self.records.iter().filter(|r| r.is_client_data())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        write_trace(self)
    }
}

/// Parses a JSONL trace, rejecting unknown content types, oversize lengths
/// and timestamps that go backwards.
pub fn read_trace(source: impl BufRead) -> Result<Trace, TraceError> {
    let mut lines = source.lines().enumerate();
    let meta = loop {
        let Some((idx, line)) = lines.next() else {
            return Err(TraceError::MissingHeader);
        };
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let meta: TraceMeta =
            serde_json::from_str(&line).map_err(|source| TraceError::Parse { line: idx + 1, source })?;
        if meta.trace_id.is_empty() {
            return Err(TraceError::Invalid {
                line: idx + 1,
                message: "trace_id must not be empty".into(),
            });
        }
        break meta;
    };

    let mut records = Vec::new();
    let mut prev = 0u64;
    for (idx, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let rec: TlsRecord =
            serde_json::from_str(&line).map_err(|source| TraceError::Parse { line: line_no, source })?;
        if !is_known_content_type(rec.ctype) {
            return Err(TraceError::Invalid {
                line: line_no,
                message: format!("content type {} outside 20..=23", rec.ctype),
            });
        }
        if rec.len > MAX_RECORD_LEN {
            return Err(TraceError::Invalid {
                line: line_no,
                message: format!("record length {} exceeds {MAX_RECORD_LEN}", rec.len),
            });
        }
        if rec.t_us < prev {
            return Err(TraceError::OrderViolation {
                line: line_no,
                prev,
                t_us: rec.t_us,
            });
        }
        prev = rec.t_us;
        records.push(rec);
    }
    Ok(Trace { meta, records })
}

pub fn write_trace(trace: &Trace) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + trace.records.len() * 48);
    write_trace_to(trace, &mut out).expect("writing to a Vec cannot fail");
    out
}

pub fn write_trace_to(trace: &Trace, mut w: impl Write) -> io::Result<()> {
    serde_json::to_writer(&mut w, &trace.meta)?;
    w.write_all(b"\n")?;
    for rec in &trace.records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// `(t_us, len)` of client application-data records in time order.
pub fn client_record_lengths(trace: &Trace) -> Vec<(u64, u16)> {
    trace.client_data().map(|r| (r.t_us, r.len)).collect()
}
