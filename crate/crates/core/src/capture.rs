//! Classic pcap parsing and bidirectional TCP session grouping.
//!
//! Only Ethernet captures carrying IPv4/TCP are decoded. Everything else
//! (UDP, IPv6, ARP, fragments, frames cut short by the snap length) is
//! counted in [`SkipCounts`] and dropped rather than treated as an error.
//! A file-level problem (bad global header, record cut off by EOF) aborts
//! the whole file.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PCAP_MAGIC_MICROS: u32 = 0xA1B2_C3D4;
pub const PCAP_MAGIC_NANOS: u32 = 0xA1B2_3C4D;
pub const LINKTYPE_ETHERNET: u32 = 1;

const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;
const MAX_RECORD_LEN: u32 = 16 * 1024 * 1024;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_IPV6: u16 = 0x86DD;
const ETHERTYPE_VLAN: u16 = 0x8100;
const ETHERTYPE_QINQ: u16 = 0x88A8;

pub const IPPROTO_TCP: u8 = 6;
pub const IPPROTO_UDP: u8 = 17;

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed pcap global header at byte offset {offset}: {reason}")]
    MalformedGlobalHeader { offset: u64, reason: String },
    #[error("pcap record truncated at byte offset {offset}: file ends mid-record")]
    TruncatedRecordHeader { offset: u64 },
    #[error("pcap record at byte offset {offset} claims {len} captured bytes")]
    OversizedRecord { offset: u64, len: u32 },
    #[error("read failed at byte offset {offset}: {source}")]
    Read {
        offset: u64,
        #[source]
        source: io::Error,
    },
}

/// 48-bit hardware address.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct MacAddr(pub [u8; 6]);

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

impl fmt::Debug for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("invalid MAC address {0:?}")]
pub struct ParseMacError(pub String);

impl FromStr for MacAddr {
    type Err = ParseMacError;

    /// Accepts `aa:bb:cc:dd:ee:ff` or `aa-bb-cc-dd-ee-ff`, either case.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split([':', '-']).collect();
        if parts.len() != 6 {
            return Err(ParseMacError(s.to_string()));
        }
        let mut out = [0u8; 6];
        for (slot, part) in out.iter_mut().zip(&parts) {
            if part.len() != 2 {
                return Err(ParseMacError(s.to_string()));
            }
            *slot = u8::from_str_radix(part, 16).map_err(|_| ParseMacError(s.to_string()))?;
        }
        Ok(MacAddr(out))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp {
    pub secs: u64,
    pub nanos: u32,
}

impl Timestamp {
    pub fn as_secs_f64(&self) -> f64 {
        self.secs as f64 + self.nanos as f64 * 1e-9
    }
}

/// One decoded TCP-over-IPv4 packet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPacket {
    /// Position of the record in the file, counting every record (skipped ones too).
    pub capture_index: u64,
    pub timestamp: Timestamp,
    pub src_mac: MacAddr,
    pub dst_mac: MacAddr,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub ip_protocol: u8,
    pub tcp_payload: Vec<u8>,
}

impl RawPacket {
    pub fn source(&self) -> Endpoint {
        Endpoint::new(self.src_ip, self.src_port)
    }

    pub fn destination(&self) -> Endpoint {
        Endpoint::new(self.dst_ip, self.dst_port)
    }

    pub fn session_key(&self) -> SessionKey {
        SessionKey::new(self.source(), self.destination())
    }
}

/// Counters for records that were read but not turned into a [`RawPacket`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipCounts {
    pub udp: u64,
    pub other_ip_protocol: u64,
    pub ipv6: u64,
    pub non_ip: u64,
    pub fragment: u64,
    pub truncated: u64,
    pub unsupported_link: u64,
}

impl SkipCounts {
    pub fn total(&self) -> u64 {
        self.udp
            + self.other_ip_protocol
            + self.ipv6
            + self.non_ip
            + self.fragment
            + self.truncated
            + self.unsupported_link
    }

    pub fn merge(&mut self, other: &SkipCounts) {
        self.udp += other.udp;
        self.other_ip_protocol += other.other_ip_protocol;
        self.ipv6 += other.ipv6;
        self.non_ip += other.non_ip;
        self.fragment += other.fragment;
        self.truncated += other.truncated;
        self.unsupported_link += other.unsupported_link;
    }
}

/// Result of reading one pcap file.
#[derive(Debug, Clone, Default)]
pub struct Capture {
    pub link_type: u32,
    pub records: u64,
    pub packets: Vec<RawPacket>,
    pub skipped: SkipCounts,
}

#[derive(Clone, Copy)]
enum ByteOrder {
    Little,
    Big,
}

impl ByteOrder {
    fn u32(self, b: &[u8]) -> u32 {
        let arr = [b[0], b[1], b[2], b[3]];
        match self {
            ByteOrder::Little => u32::from_le_bytes(arr),
            ByteOrder::Big => u32::from_be_bytes(arr),
        }
    }
}

/// Reads until `buf` is full or EOF; returns the number of bytes read.
fn read_up_to<R: Read>(reader: &mut R, buf: &mut [u8], offset: u64) -> Result<usize, CaptureError> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(source) => {
                return Err(CaptureError::Read {
                    offset: offset + filled as u64,
                    source,
                })
            }
        }
    }
    Ok(filled)
}

/// Parses a classic pcap stream (either byte order, micro- or nanosecond
/// timestamps) and keeps the TCP-over-IPv4 packets.
pub fn parse_pcap<R: Read>(mut reader: R) -> Result<Capture, CaptureError> {
    let mut header = [0u8; GLOBAL_HEADER_LEN];
    let got = read_up_to(&mut reader, &mut header, 0)?;
    if got < GLOBAL_HEADER_LEN {
        return Err(CaptureError::MalformedGlobalHeader {
            offset: got as u64,
            reason: format!("expected {GLOBAL_HEADER_LEN} header bytes, found {got}"),
        });
    }
    let le_magic = u32::from_le_bytes([header[0], header[1], header[2], header[3]]);
    let (order, nanos) = match le_magic {
        PCAP_MAGIC_MICROS => (ByteOrder::Little, false),
        PCAP_MAGIC_NANOS => (ByteOrder::Little, true),
        m if m.swap_bytes() == PCAP_MAGIC_MICROS => (ByteOrder::Big, false),
        m if m.swap_bytes() == PCAP_MAGIC_NANOS => (ByteOrder::Big, true),
        m => {
            return Err(CaptureError::MalformedGlobalHeader {
                offset: 0,
                reason: format!("unrecognised magic number 0x{m:08x}"),
            })
        }
    };
    let link_type = order.u32(&header[20..24]);

    let mut capture = Capture {
        link_type,
        ..Capture::default()
    };
    let mut offset = GLOBAL_HEADER_LEN as u64;
    let mut record = [0u8; RECORD_HEADER_LEN];
    let mut data = Vec::new();
    loop {
        let got = read_up_to(&mut reader, &mut record, offset)?;
        if got == 0 {
            break;
        }
        if got < RECORD_HEADER_LEN {
            return Err(CaptureError::TruncatedRecordHeader { offset });
        }
        let ts_secs = order.u32(&record[0..4]);
        let ts_frac = order.u32(&record[4..8]);
        let incl_len = order.u32(&record[8..12]);
        if incl_len > MAX_RECORD_LEN {
            return Err(CaptureError::OversizedRecord {
                offset,
                len: incl_len,
            });
        }
        data.resize(incl_len as usize, 0);
        let got = read_up_to(&mut reader, &mut data, offset + RECORD_HEADER_LEN as u64)?;
        if got < data.len() {
            return Err(CaptureError::TruncatedRecordHeader { offset });
        }

        let timestamp = Timestamp {
            secs: ts_secs as u64,
            nanos: if nanos { ts_frac } else { ts_frac.saturating_mul(1000) },
        };
        let index = capture.records;
        capture.records += 1;
        offset += (RECORD_HEADER_LEN + data.len()) as u64;

        if link_type != LINKTYPE_ETHERNET {
            capture.skipped.unsupported_link += 1;
            continue;
        }
        match decode_ethernet(&data) {
            Ok(mut packet) => {
                packet.capture_index = index;
                packet.timestamp = timestamp;
                capture.packets.push(packet);
            }
            Err(reason) => reason.count(&mut capture.skipped),
        }
    }
    Ok(capture)
}

pub fn parse_pcap_file(path: impl AsRef<Path>) -> Result<Capture, CaptureError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CaptureError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_pcap(BufReader::with_capacity(1 << 16, file))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Skip {
    Udp,
    OtherProtocol,
    Ipv6,
    NonIp,
    Fragment,
    Truncated,
}

impl Skip {
    fn count(self, counts: &mut SkipCounts) {
        match self {
            Skip::Udp => counts.udp += 1,
            Skip::OtherProtocol => counts.other_ip_protocol += 1,
            Skip::Ipv6 => counts.ipv6 += 1,
            Skip::NonIp => counts.non_ip += 1,
            Skip::Fragment => counts.fragment += 1,
            Skip::Truncated => counts.truncated += 1,
        }
    }
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

fn mac_at(b: &[u8], at: usize) -> MacAddr {
    let mut m = [0u8; 6];
    m.copy_from_slice(&b[at..at + 6]);
    MacAddr(m)
}

fn decode_ethernet(frame: &[u8]) -> Result<RawPacket, Skip> {
    if frame.len() < 14 {
        return Err(Skip::Truncated);
    }
    let dst_mac = mac_at(frame, 0);
    let src_mac = mac_at(frame, 6);
    let mut ethertype = be16(frame, 12);
    let mut at = 14;
    while ethertype == ETHERTYPE_VLAN || ethertype == ETHERTYPE_QINQ {
        if frame.len() < at + 4 {
            return Err(Skip::Truncated);
        }
        ethertype = be16(frame, at + 2);
        at += 4;
    }
    match ethertype {
        ETHERTYPE_IPV4 => {}
        ETHERTYPE_IPV6 => return Err(Skip::Ipv6),
        _ => return Err(Skip::NonIp),
    }

    let ip = &frame[at..];
    if ip.len() < 20 {
        return Err(Skip::Truncated);
    }
    if ip[0] >> 4 != 4 {
        return Err(Skip::NonIp);
    }
    let ip_header_len = ((ip[0] & 0x0f) as usize) * 4;
    let total_len = be16(ip, 2) as usize;
    if ip_header_len < 20 || total_len < ip_header_len || ip.len() < ip_header_len {
        return Err(Skip::Truncated);
    }
    let flags_fragment = be16(ip, 6);
    let more_fragments = flags_fragment & 0x2000 != 0;
    let fragment_offset = flags_fragment & 0x1fff;
    let protocol = ip[9];
    match protocol {
        IPPROTO_TCP => {}
        IPPROTO_UDP => return Err(Skip::Udp),
        _ => return Err(Skip::OtherProtocol),
    }
    if more_fragments || fragment_offset != 0 {
        return Err(Skip::Fragment);
    }
    let src_ip = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
    let dst_ip = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);

    // The captured slice may be shorter than total_len (snap length) or
    // longer (Ethernet trailer padding); only total_len counts.
    if ip.len() < total_len {
        return Err(Skip::Truncated);
    }
    let tcp = &ip[ip_header_len..total_len];
    if tcp.len() < 20 {
        return Err(Skip::Truncated);
    }
    let tcp_header_len = ((tcp[12] >> 4) as usize) * 4;
    if tcp_header_len < 20 || tcp_header_len > tcp.len() {
        return Err(Skip::Truncated);
    }
    Ok(RawPacket {
        capture_index: 0,
        timestamp: Timestamp::default(),
        src_mac,
        dst_mac,
        src_ip,
        dst_ip,
        src_port: be16(tcp, 0),
        dst_port: be16(tcp, 2),
        ip_protocol: protocol,
        tcp_payload: tcp[tcp_header_len..].to_vec(),
    })
}

/// An (address, port) pair. Ordering is lexicographic: address first, then port.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Endpoint {
    pub ip: Ipv4Addr,
    pub port: u16,
}

impl Endpoint {
    pub fn new(ip: Ipv4Addr, port: u16) -> Self {
        Endpoint { ip, port }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.ip, self.port)
    }
}

/// Direction-independent TCP 5-tuple. `low <= high` always holds, so both
/// directions of a connection produce the same key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SessionKey {
    low: Endpoint,
    high: Endpoint,
}

impl SessionKey {
    pub fn new(x: Endpoint, y: Endpoint) -> Self {
        if x <= y {
            SessionKey { low: x, high: y }
        } else {
            SessionKey { low: y, high: x }
        }
    }

    pub fn endpoint_a(&self) -> Endpoint {
        self.low
    }

    pub fn endpoint_b(&self) -> Endpoint {
        self.high
    }

    pub fn protocol(&self) -> u8 {
        IPPROTO_TCP
    }
}

impl fmt::Display for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TCP {} <-> {}", self.low, self.high)
    }
}

/// All packets of one bidirectional TCP session, in capture order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionRecord {
    pub key: SessionKey,
    pub initiator_mac: MacAddr,
    pub packets: Vec<RawPacket>,
}

impl SessionRecord {
    pub fn first_capture_index(&self) -> u64 {
        self.packets.first().map_or(u64::MAX, |p| p.capture_index)
    }

    /// Source endpoint of the earliest packet.
    pub fn initiator(&self) -> Option<Endpoint> {
        self.packets.first().map(RawPacket::source)
    }
}

/// Groups TCP packets into bidirectional sessions keyed by the canonical
/// 5-tuple. The returned map iterates sessions in order of their first
/// packet; packets inside a session stay in capture order.
///
/// No reassembly is performed: retransmissions and out-of-order segments
/// are kept exactly as captured.
pub fn split_sessions<I>(packets: I) -> IndexMap<SessionKey, SessionRecord>
where
    I: IntoIterator<Item = RawPacket>,
{
    let mut packets: Vec<RawPacket> = packets.into_iter().collect();
    packets.sort_by_key(|p| p.capture_index);
    let mut sessions: IndexMap<SessionKey, SessionRecord> = IndexMap::new();
    for packet in packets {
        let key = packet.session_key();
        sessions
            .entry(key)
            .or_insert_with(|| SessionRecord {
                key,
                initiator_mac: packet.src_mac,
                packets: Vec::new(),
            })
            .packets
            .push(packet);
    }
    sessions
}

/// Buckets sessions by the MAC address that opened them. Buckets appear in
/// order of first occurrence and keep the input order inside each bucket.
pub fn group_by_mac<I>(sessions: I) -> IndexMap<MacAddr, Vec<SessionRecord>>
where
    I: IntoIterator<Item = SessionRecord>,
{
    let mut buckets: IndexMap<MacAddr, Vec<SessionRecord>> = IndexMap::new();
    for session in sessions {
        buckets.entry(session.initiator_mac).or_default().push(session);
    }
    buckets
}

/// Writes classic little-endian, microsecond pcap files.
pub struct PcapWriter<W: Write> {
    out: W,
    big_endian: bool,
}

impl<W: Write> PcapWriter<W> {
    pub fn new(out: W) -> io::Result<Self> {
        Self::with_byte_order(out, false)
    }

    /// `big_endian = true` produces the byte-swapped variant of the format.
    pub fn with_byte_order(mut out: W, big_endian: bool) -> io::Result<Self> {
        let fields: [u32; 5] = [PCAP_MAGIC_MICROS, 0, 0, 65535, LINKTYPE_ETHERNET];
        let mut header = Vec::with_capacity(GLOBAL_HEADER_LEN);
        let put32 = |h: &mut Vec<u8>, v: u32| {
            if big_endian {
                h.extend_from_slice(&v.to_be_bytes())
            } else {
                h.extend_from_slice(&v.to_le_bytes())
            }
        };
        put32(&mut header, fields[0]);
        // version 2.4
        let (major, minor) = (2u16, 4u16);
        if big_endian {
            header.extend_from_slice(&major.to_be_bytes());
            header.extend_from_slice(&minor.to_be_bytes());
        } else {
            header.extend_from_slice(&major.to_le_bytes());
            header.extend_from_slice(&minor.to_le_bytes());
        }
        for v in &fields[1..] {
            put32(&mut header, *v);
        }
        out.write_all(&header)?;
        Ok(PcapWriter { out, big_endian })
    }

    pub fn write_frame(&mut self, timestamp: Timestamp, frame: &[u8]) -> io::Result<()> {
        let micros = timestamp.nanos / 1000;
        let fields = [timestamp.secs as u32, micros, frame.len() as u32, frame.len() as u32];
        for v in fields {
            if self.big_endian {
                self.out.write_all(&v.to_be_bytes())?;
            } else {
                self.out.write_all(&v.to_le_bytes())?;
            }
        }
        self.out.write_all(frame)
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl PcapWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> io::Result<Self> {
        PcapWriter::new(BufWriter::new(File::create(path)?))
    }
}

/// Fields for [`ethernet_frame`].
#[derive(Debug, Clone)]
pub struct FrameSpec<'a> {
    pub src_mac: MacAddr,
    pub dst_mac: MacAddr,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: u8,
    /// TCP flags byte; ignored for UDP.
    pub tcp_flags: u8,
    pub seq: u32,
    pub ack: u32,
    pub payload: &'a [u8],
}

pub mod tcp_flags {
    pub const FIN: u8 = 0x01;
    pub const SYN: u8 = 0x02;
    pub const PSH: u8 = 0x08;
    pub const ACK: u8 = 0x10;
}

fn ipv4_checksum(header: &[u8]) -> u16 {
    let mut sum: u32 = 0;
    for chunk in header.chunks(2) {
        let word = if chunk.len() == 2 {
            u16::from_be_bytes([chunk[0], chunk[1]])
        } else {
            u16::from_be_bytes([chunk[0], 0])
        };
        sum += word as u32;
    }
    while sum >> 16 != 0 {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Builds an Ethernet/IPv4/{TCP,UDP} frame. Transport checksums are left
/// zero; the IPv4 header checksum is filled in.
pub fn ethernet_frame(spec: &FrameSpec<'_>) -> Vec<u8> {
    let transport_len = match spec.protocol {
        IPPROTO_UDP => 8,
        _ => 20,
    };
    let total_len = 20 + transport_len + spec.payload.len();
    let mut frame = Vec::with_capacity(14 + total_len);
    frame.extend_from_slice(&spec.dst_mac.0);
    frame.extend_from_slice(&spec.src_mac.0);
    frame.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());

    let ip_start = frame.len();
    frame.extend_from_slice(&[0x45, 0x00]);
    frame.extend_from_slice(&(total_len as u16).to_be_bytes());
    frame.extend_from_slice(&[0x00, 0x00, 0x40, 0x00, 64, spec.protocol, 0x00, 0x00]);
    frame.extend_from_slice(&spec.src_ip.octets());
    frame.extend_from_slice(&spec.dst_ip.octets());
    let checksum = ipv4_checksum(&frame[ip_start..ip_start + 20]);
    frame[ip_start + 10..ip_start + 12].copy_from_slice(&checksum.to_be_bytes());

    frame.extend_from_slice(&spec.src_port.to_be_bytes());
    frame.extend_from_slice(&spec.dst_port.to_be_bytes());
    if spec.protocol == IPPROTO_UDP {
        frame.extend_from_slice(&((8 + spec.payload.len()) as u16).to_be_bytes());
        frame.extend_from_slice(&[0, 0]);
    } else {
        frame.extend_from_slice(&spec.seq.to_be_bytes());
        frame.extend_from_slice(&spec.ack.to_be_bytes());
        frame.extend_from_slice(&[0x50, spec.tcp_flags, 0xff, 0xff, 0, 0, 0, 0]);
    }
    frame.extend_from_slice(spec.payload);
    frame
}
