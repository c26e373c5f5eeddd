//! Classic pcap files: reading, frame decoding down to TCP, and writing.
//!
//! Both byte orders and both timestamp resolutions are accepted. Frames are
//! Ethernet (linktype 1, optional 802.1Q tag) or raw IP (linktype 101);
//! only unfragmented IPv4 TCP is decoded.

use std::net::{Ipv4Addr, SocketAddrV4};

use thiserror::Error;

pub const LINKTYPE_ETHERNET: u32 = 1;
pub const LINKTYPE_RAW: u32 = 101;

const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
const MAGIC_NANOS: u32 = 0xa1b2_3c4d;
const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_VLAN: u16 = 0x8100;
const IPPROTO_TCP: u8 = 6;
const IPPROTO_UDP: u8 = 17;

pub const TCP_FIN: u8 = 0x01;
pub const TCP_SYN: u8 = 0x02;
pub const TCP_PSH: u8 = 0x08;
pub const TCP_ACK: u8 = 0x10;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PcapError {
    #[error("not a classic pcap file (magic {0:#010x})")]
    BadMagic(u32),
    #[error("capture truncated at byte {offset}")]
    TruncatedCapture { offset: usize },
    #[error("unsupported link type {0}")]
    UnsupportedLinkType(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PcapHeader {
    pub big_endian: bool,
    pub nanos: bool,
    pub snaplen: u32,
    pub linktype: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PcapPacket<'a> {
    /// Capture time in microseconds since the epoch.
    pub ts_us: u64,
    pub orig_len: u32,
    pub data: &'a [u8],
}

#[derive(Debug, Clone)]
pub struct Capture<'a> {
    pub header: PcapHeader,
    pub packets: Vec<PcapPacket<'a>>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn u32_at(&self, offset: usize) -> u32 {
        let b: [u8; 4] = self.bytes[offset..offset + 4].try_into().unwrap();
        if self.big_endian {
            u32::from_be_bytes(b)
        } else {
            u32::from_le_bytes(b)
        }
    }
}

pub fn parse_pcap(bytes: &[u8]) -> Result<Capture<'_>, PcapError> {
    if bytes.len() < 4 {
        return Err(PcapError::BadMagic(0));
    }
    let raw = u32::from_le_bytes(bytes[..4].try_into().unwrap());
    let (big_endian, nanos) = match raw {
        MAGIC_MICROS => (false, false),
        MAGIC_NANOS => (false, true),
        m if m.swap_bytes() == MAGIC_MICROS => (true, false),
        m if m.swap_bytes() == MAGIC_NANOS => (true, true),
        other => return Err(PcapError::BadMagic(other)),
    };
    if bytes.len() < GLOBAL_HEADER_LEN {
        return Err(PcapError::TruncatedCapture { offset: bytes.len() });
    }
    let r = Reader { bytes, big_endian };
    let header = PcapHeader {
        big_endian,
        nanos,
        snaplen: r.u32_at(16),
        linktype: r.u32_at(20),
    };
    if header.linktype != LINKTYPE_ETHERNET && header.linktype != LINKTYPE_RAW {
        return Err(PcapError::UnsupportedLinkType(header.linktype));
    }

    let mut packets = Vec::new();
    let mut offset = GLOBAL_HEADER_LEN;
    while offset < bytes.len() {
        if bytes.len() - offset < RECORD_HEADER_LEN {
            return Err(PcapError::TruncatedCapture { offset });
        }
        let secs = r.u32_at(offset) as u64;
        let frac = r.u32_at(offset + 4) as u64;
        let incl = r.u32_at(offset + 8) as usize;
        let orig_len = r.u32_at(offset + 12);
        let start = offset + RECORD_HEADER_LEN;
        if bytes.len() - start < incl {
            return Err(PcapError::TruncatedCapture { offset });
        }
        let sub_us = if nanos { frac / 1000 } else { frac };
        packets.push(PcapPacket {
            ts_us: secs * 1_000_000 + sub_us,
            orig_len,
            data: &bytes[start..start + incl],
        });
        offset = start + incl;
    }
    Ok(Capture { header, packets })
}

/// A decoded IPv4 TCP segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TcpSegment<'a> {
    pub src: SocketAddrV4,
    pub dst: SocketAddrV4,
    pub seq: u32,
    pub flags: u8,
    pub payload: &'a [u8],
}

impl TcpSegment<'_> {
    pub fn is_syn(&self) -> bool {
        self.flags & TCP_SYN != 0
    }
}

/// What a frame carried, as far as ingest cares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame<'a> {
    Tcp(TcpSegment<'a>),
    Udp,
    Other,
}

pub fn decode_frame(linktype: u32, data: &[u8]) -> Frame<'_> {
    let ip = match linktype {
        LINKTYPE_ETHERNET => {
            if data.len() < 14 {
                return Frame::Other;
            }
            let mut ethertype = u16::from_be_bytes([data[12], data[13]]);
            let mut start = 14;
            if ethertype == ETHERTYPE_VLAN {
                if data.len() < 18 {
                    return Frame::Other;
                }
                ethertype = u16::from_be_bytes([data[16], data[17]]);
                start = 18;
            }
            if ethertype != ETHERTYPE_IPV4 {
                return Frame::Other;
            }
            &data[start..]
        }
        LINKTYPE_RAW => data,
        _ => return Frame::Other,
    };
    decode_ipv4(ip)
}

fn decode_ipv4(ip: &[u8]) -> Frame<'_> {
    if ip.len() < 20 || ip[0] >> 4 != 4 {
        return Frame::Other;
    }
    let ihl = (ip[0] & 0x0f) as usize * 4;
    let total = u16::from_be_bytes([ip[2], ip[3]]) as usize;
    if ihl < 20 || total < ihl || ip.len() < ihl {
        return Frame::Other;
    }
    // Ethernet padding sits past the IP total length; snaplen may cut before it.
    let ip = &ip[..total.min(ip.len())];
    let frag = u16::from_be_bytes([ip[6], ip[7]]);
    let more_fragments = frag & 0x2000 != 0;
    if more_fragments || frag & 0x1fff != 0 {
        return Frame::Other;
    }
    let src_ip = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
    let dst_ip = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);
    match ip[9] {
        IPPROTO_UDP => Frame::Udp,
        IPPROTO_TCP => {
            let tcp = &ip[ihl..];
            if tcp.len() < 20 {
                return Frame::Other;
            }
            let data_off = (tcp[12] >> 4) as usize * 4;
            if data_off < 20 || tcp.len() < data_off {
                return Frame::Other;
            }
            Frame::Tcp(TcpSegment {
                src: SocketAddrV4::new(src_ip, u16::from_be_bytes([tcp[0], tcp[1]])),
                dst: SocketAddrV4::new(dst_ip, u16::from_be_bytes([tcp[2], tcp[3]])),
                seq: u32::from_be_bytes([tcp[4], tcp[5], tcp[6], tcp[7]]),
                flags: tcp[13],
                payload: &tcp[data_off..],
            })
        }
        _ => Frame::Other,
    }
}

/// Writes little-endian classic pcap files.
#[derive(Debug, Clone)]
pub struct PcapWriter {
    buf: Vec<u8>,
    nanos: bool,
}

impl PcapWriter {
    pub fn new(linktype: u32, nanos: bool) -> Self {
        let mut buf = Vec::new();
        let magic = if nanos { MAGIC_NANOS } else { MAGIC_MICROS };
        buf.extend_from_slice(&magic.to_le_bytes());
        buf.extend_from_slice(&2u16.to_le_bytes());
        buf.extend_from_slice(&4u16.to_le_bytes());
        buf.extend_from_slice(&0i32.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        buf.extend_from_slice(&65_535u32.to_le_bytes());
        buf.extend_from_slice(&linktype.to_le_bytes());
        Self { buf, nanos }
    }

    pub fn ethernet() -> Self {
        Self::new(LINKTYPE_ETHERNET, false)
    }

    pub fn packet(&mut self, ts_us: u64, frame: &[u8]) -> &mut Self {
        let secs = (ts_us / 1_000_000) as u32;
        let sub = ts_us % 1_000_000;
        let frac = if self.nanos { sub * 1000 } else { sub } as u32;
        for v in [secs, frac, frame.len() as u32, frame.len() as u32] {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self.buf.extend_from_slice(frame);
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// IPv4 packet (no link header) carrying one TCP segment. Checksums are zero.
pub fn ipv4_tcp_packet(src: SocketAddrV4, dst: SocketAddrV4, seq: u32, flags: u8, payload: &[u8]) -> Vec<u8> {
    let mut tcp = Vec::with_capacity(20 + payload.len());
    tcp.extend_from_slice(&src.port().to_be_bytes());
    tcp.extend_from_slice(&dst.port().to_be_bytes());
    tcp.extend_from_slice(&seq.to_be_bytes());
    tcp.extend_from_slice(&0u32.to_be_bytes());
    tcp.push(5 << 4);
    tcp.push(flags);
    tcp.extend_from_slice(&65_535u16.to_be_bytes());
    tcp.extend_from_slice(&[0, 0, 0, 0]);
    tcp.extend_from_slice(payload);
    ipv4_packet(*src.ip(), *dst.ip(), IPPROTO_TCP, &tcp)
}

pub fn ipv4_udp_packet(src: SocketAddrV4, dst: SocketAddrV4, payload: &[u8]) -> Vec<u8> {
    let mut udp = Vec::with_capacity(8 + payload.len());
    udp.extend_from_slice(&src.port().to_be_bytes());
    udp.extend_from_slice(&dst.port().to_be_bytes());
    udp.extend_from_slice(&((8 + payload.len()) as u16).to_be_bytes());
    udp.extend_from_slice(&[0, 0]);
    udp.extend_from_slice(payload);
    ipv4_packet(*src.ip(), *dst.ip(), IPPROTO_UDP, &udp)
}

fn ipv4_packet(src: Ipv4Addr, dst: Ipv4Addr, proto: u8, body: &[u8]) -> Vec<u8> {
    let total = (20 + body.len()) as u16;
    let mut ip = Vec::with_capacity(total as usize);
    ip.extend_from_slice(&[0x45, 0]);
    ip.extend_from_slice(&total.to_be_bytes());
    ip.extend_from_slice(&[0, 0, 0x40, 0, 64, proto, 0, 0]);
    ip.extend_from_slice(&src.octets());
    ip.extend_from_slice(&dst.octets());
    ip.extend_from_slice(body);
    ip
}

/// Wraps an IP packet in an Ethernet II header.
pub fn ethernet_frame(ip_packet: &[u8]) -> Vec<u8> {
    let mut f = Vec::with_capacity(14 + ip_packet.len());
    f.extend_from_slice(&[0x02, 0, 0, 0, 0, 0x02, 0x02, 0, 0, 0, 0, 0x01]);
    f.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
    f.extend_from_slice(ip_packet);
    f
}
