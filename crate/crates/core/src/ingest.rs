//! Capture to trace: TCP reassembly per direction, then TLS framing.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::str::FromStr;

use thiserror::Error;

use crate::pcap::{decode_frame, parse_pcap, Frame, PcapError, TCP_ACK};
use crate::profile::OperationalProfile;
use crate::tls::{extract_tls_records, ByteTimes};
use crate::trace::{Direction, Origin, TlsRecord, Trace, TraceMeta};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error(transparent)]
    Pcap(#[from] PcapError),
    #[error("capture holds no TLS-bearing TCP connection for the selected client")]
    NoTcpPayload,
    #[error("retransmitted bytes differ from the first copy on {flow} at stream offset {offset}")]
    ConflictingRetransmission { flow: String, offset: u64 },
    #[error("invalid client selector {0:?} (expected ADDR, ADDR:PORT or first-syn)")]
    BadClientHint(String),
}

/// Which side of each connection is the viewer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientHint {
    /// A fixed address; `port: None` matches every port on it.
    Endpoint { ip: Ipv4Addr, port: Option<u16> },
    /// The host that sent the first bare SYN in the capture.
    FirstSynSender,
}

impl ClientHint {
    fn matches(&self, ep: SocketAddrV4) -> bool {
        match *self {
            ClientHint::Endpoint { ip, port } => *ep.ip() == ip && port.is_none_or(|p| p == ep.port()),
            ClientHint::FirstSynSender => false,
        }
    }
}

impl FromStr for ClientHint {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("first-syn") {
            return Ok(ClientHint::FirstSynSender);
        }
        if let Ok(ep) = s.parse::<SocketAddrV4>() {
            return Ok(ClientHint::Endpoint {
                ip: *ep.ip(),
                port: Some(ep.port()),
            });
        }
        s.parse::<Ipv4Addr>()
            .map(|ip| ClientHint::Endpoint { ip, port: None })
            .map_err(|_| IngestError::BadClientHint(s.to_string()))
    }
}

impl fmt::Display for ClientHint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClientHint::Endpoint { ip, port: Some(p) } => write!(f, "{ip}:{p}"),
            ClientHint::Endpoint { ip, port: None } => write!(f, "{ip}"),
            ClientHint::FirstSynSender => f.write_str("first-syn"),
        }
    }
}

/// The trace plus what was lost along the way.
#[derive(Debug, Clone)]
pub struct IngestReport {
    pub trace: Trace,
    /// TCP connections seen involving the client.
    pub connections: usize,
    /// Connections that yielded at least one TLS record.
    pub tls_connections: usize,
    /// Directions whose stream was abandoned at a missing segment.
    pub gaps: usize,
    /// Directions where framing hit a bad header after parsing some records.
    pub framing_halts: usize,
    /// Bytes left unparsed at stream ends.
    pub residue_bytes: usize,
}

#[derive(Debug)]
struct PendingSegment {
    seq: u32,
    t_us: u64,
    payload: Vec<u8>,
}

#[derive(Debug, Default)]
struct Flow {
    syn_seq: Option<u32>,
    segments: Vec<PendingSegment>,
}

#[derive(Debug)]
struct Connection {
    a: SocketAddrV4,
    b: SocketAddrV4,
    first_src: SocketAddrV4,
    flows: [Flow; 2],
}

impl Connection {
    fn flow_mut(&mut self, src: SocketAddrV4) -> &mut Flow {
        if src == self.a {
            &mut self.flows[0]
        } else {
            &mut self.flows[1]
        }
    }
}

/// A direction's bytes in sequence order, cut at the first hole.
#[derive(Debug, Default, PartialEq, Eq)]
pub struct Reassembled {
    pub bytes: Vec<u8>,
    pub times: ByteTimes,
    pub gap: bool,
}

/// Places every segment at its stream offset and concatenates from offset
/// zero. Where copies overlap, the earliest captured one is kept; a later copy
/// that disagrees with it is an error, reported as the stream offset of the
/// first differing byte.
fn reassemble(flow: &Flow) -> Result<Reassembled, u64> {
    let data: Vec<&PendingSegment> = flow.segments.iter().filter(|s| !s.payload.is_empty()).collect();
    if data.is_empty() {
        return Ok(Reassembled::default());
    }
    let base = match flow.syn_seq {
        Some(isn) => isn.wrapping_add(1),
        None => {
            let anchor = data[0].seq;
            let min_rel = data
                .iter()
                .map(|s| s.seq.wrapping_sub(anchor) as i32 as i64)
                .min()
                .unwrap_or(0);
            anchor.wrapping_add(min_rel as i32 as u32)
        }
    };

    // disjoint pieces keyed by start offset: (end, capture time, bytes)
    let mut placed: BTreeMap<u64, (u64, u64, Vec<u8>)> = BTreeMap::new();
    for seg in data {
        let rel = seg.seq.wrapping_sub(base) as i32 as i64;
        let end = rel + seg.payload.len() as i64;
        if end <= 0 {
            continue;
        }
        let skip = (-rel).max(0) as usize;
        let start = rel.max(0) as u64;
        let end = end as u64;
        let payload = &seg.payload[skip..];

        let mut covered: Vec<(u64, u64)> = Vec::new();
        for (&p_start, (p_end, _, bytes)) in placed.range(..end).rev() {
            if *p_end <= start {
                break;
            }
            let lo = p_start.max(start);
            let hi = (*p_end).min(end);
            let have = &bytes[(lo - p_start) as usize..(hi - p_start) as usize];
            let got = &payload[(lo - start) as usize..(hi - start) as usize];
            if let Some(pos) = have.iter().zip(got).position(|(a, b)| a != b) {
                return Err(lo + pos as u64);
            }
            covered.push((lo, hi));
        }
        covered.sort_unstable();
        let mut cursor = start;
        for (lo, hi) in covered.into_iter().chain([(end, end)]) {
            if lo > cursor {
                let piece = payload[(cursor - start) as usize..(lo - start) as usize].to_vec();
                placed.insert(cursor, (lo, seg.t_us, piece));
            }
            cursor = cursor.max(hi);
        }
    }

    let mut out = Reassembled::default();
    for (start, (_, t_us, bytes)) in placed {
        if start > out.bytes.len() as u64 {
            out.gap = true;
            break;
        }
        out.times.push(out.bytes.len(), t_us);
        out.bytes.extend_from_slice(&bytes);
    }
    Ok(out)
}

/// Reads a classic pcap capture into a trace of TLS records.
///
/// Every TCP connection touching the client is reassembled in both
/// directions and framed as TLS. Records from all connections are merged
/// into one timeline; times are relative to the first packet in the file.
pub fn ingest_pcap(
    capture: &[u8],
    client_hint: &ClientHint,
    trace_id: &str,
    profile: Option<OperationalProfile>,
) -> Result<IngestReport, IngestError> {
    let cap = parse_pcap(capture)?;
    let start_us = cap.packets.first().map_or(0, |p| p.ts_us);

    let mut order: Vec<(SocketAddrV4, SocketAddrV4)> = Vec::new();
    let mut conns: HashMap<(SocketAddrV4, SocketAddrV4), Connection> = HashMap::new();
    let mut first_syn: Option<Ipv4Addr> = None;

    for pkt in &cap.packets {
        let Frame::Tcp(seg) = decode_frame(cap.header.linktype, pkt.data) else {
            continue;
        };
        if seg.is_syn() && seg.flags & TCP_ACK == 0 && first_syn.is_none() {
            first_syn = Some(*seg.src.ip());
        }
        let key = if seg.src <= seg.dst {
            (seg.src, seg.dst)
        } else {
            (seg.dst, seg.src)
        };
        let conn = conns.entry(key).or_insert_with(|| {
            order.push(key);
            Connection {
                a: key.0,
                b: key.1,
                first_src: seg.src,
                flows: Default::default(),
            }
        });
        let flow = conn.flow_mut(seg.src);
        if seg.is_syn() {
            flow.syn_seq.get_or_insert(seg.seq);
        }
        if !seg.payload.is_empty() {
            flow.segments.push(PendingSegment {
                seq: seg.seq,
                t_us: pkt.ts_us.saturating_sub(start_us),
                payload: seg.payload.to_vec(),
            });
        }
    }

    let resolved = match (*client_hint, first_syn) {
        (ClientHint::FirstSynSender, Some(ip)) => Some(ClientHint::Endpoint { ip, port: None }),
        (ClientHint::FirstSynSender, None) => None,
        (hint, _) => Some(hint),
    };

    let mut merged: Vec<TlsRecord> = Vec::new();
    let mut report_conns = 0;
    let mut tls_conns = 0;
    let mut gaps = 0;
    let mut halts = 0;
    let mut residue = 0;
    for key in &order {
        let conn = &conns[key];
        let client = match resolved {
            Some(hint) if hint.matches(conn.a) => conn.a,
            Some(hint) if hint.matches(conn.b) => conn.b,
            Some(_) => continue,
            // no SYN anywhere: whoever spoke first on the connection
            None => conn.first_src,
        };
        report_conns += 1;
        let mut conn_records = Vec::new();
        for (flow, src) in conn.flows.iter().zip([conn.a, conn.b]) {
            let dir = if src == client {
                Direction::ClientToServer
            } else {
                Direction::ServerToClient
            };
            let stream = reassemble(flow).map_err(|offset| IngestError::ConflictingRetransmission {
                flow: format!("{src} -> {}", if src == conn.a { conn.b } else { conn.a }),
                offset,
            })?;
            gaps += stream.gap as usize;
            let scan = extract_tls_records(&stream.bytes, &stream.times, dir);
            if !scan.records.is_empty() {
                halts += scan.halt.is_some() as usize;
                residue += scan.residue;
            }
            conn_records.extend(scan.records);
        }
        if !conn_records.is_empty() {
            tls_conns += 1;
            merged.extend(conn_records);
        }
    }

    if merged.is_empty() {
        return Err(IngestError::NoTcpPayload);
    }
    let mut meta = TraceMeta::new(trace_id, Origin::Captured, profile);
    meta.connections = Some(tls_conns as u32);
    Ok(IngestReport {
        trace: Trace::from_unsorted(meta, merged),
        connections: report_conns,
        tls_connections: tls_conns,
        gaps,
        framing_halts: halts,
        residue_bytes: residue,
    })
}
