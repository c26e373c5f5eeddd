//! TLS record framing over a reassembled byte stream.

use thiserror::Error;

use crate::trace::{is_known_content_type, Direction, TlsRecord, MAX_RECORD_LEN};

pub const RECORD_HEADER_LEN: usize = 5;

/// Why framing stopped before the end of the stream.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FramingError {
    #[error("invalid TLS content type {byte:#04x} at offset {offset}")]
    InvalidContentType { offset: usize, byte: u8 },
    #[error("record length {len} at offset {offset} exceeds {MAX_RECORD_LEN}")]
    OversizedRecord { offset: usize, len: u16 },
}

/// When each prefix of a stream had fully arrived.
///
/// Built from the capture time of every contiguous span that arrived in one
/// packet. A byte counts as available once it and every byte before it have
/// been captured, so times never decrease along the stream even when packets
/// were reordered.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ByteTimes {
    spans: Vec<(usize, u64)>,
}

impl ByteTimes {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every byte stamped with the same time.
    pub fn uniform(t_us: u64) -> Self {
        Self { spans: vec![(0, t_us)] }
    }

    /// Marks bytes from `offset` onward (until the next span) as captured at
    /// `t_us`. Offsets must be pushed in increasing order.
    pub fn push(&mut self, offset: usize, t_us: u64) {
        debug_assert!(self.spans.last().is_none_or(|&(o, _)| o < offset));
        let t_us = self.spans.last().map_or(t_us, |&(_, prev)| prev.max(t_us));
        self.spans.push((offset, t_us));
    }

    pub fn time_at(&self, offset: usize) -> u64 {
        let idx = self.spans.partition_point(|&(o, _)| o <= offset);
        if idx == 0 {
            self.spans.first().map_or(0, |&(_, t)| t)
        } else {
            self.spans[idx - 1].1
        }
    }
}

/// Result of a left-to-right framing pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordScan {
    pub records: Vec<TlsRecord>,
    /// Bytes covered by complete records, headers included.
    pub consumed: usize,
    /// Bytes left over: an incomplete trailing record, or everything from the
    /// point where framing stopped.
    pub residue: usize,
    pub halt: Option<FramingError>,
}

/// Greedily parses consecutive TLS records. Each record is stamped with the
/// time its first header byte became available (see [`ByteTimes`]).
pub fn extract_tls_records(stream: &[u8], times: &ByteTimes, dir: Direction) -> RecordScan {
    let mut records = Vec::new();
    let mut offset = 0;
    let mut halt = None;
    while stream.len() - offset >= RECORD_HEADER_LEN {
        let header = &stream[offset..offset + RECORD_HEADER_LEN];
        let ctype = header[0];
        if !is_known_content_type(ctype) {
            halt = Some(FramingError::InvalidContentType { offset, byte: ctype });
            break;
        }
        let len = u16::from_be_bytes([header[3], header[4]]);
        if len > MAX_RECORD_LEN {
            halt = Some(FramingError::OversizedRecord { offset, len });
            break;
        }
        let end = offset + RECORD_HEADER_LEN + len as usize;
        if end > stream.len() {
            break;
        }
        records.push(TlsRecord::new(times.time_at(offset), dir, ctype, len));
        offset = end;
    }
    RecordScan {
        records,
        consumed: offset,
        residue: stream.len() - offset,
        halt,
    }
}
