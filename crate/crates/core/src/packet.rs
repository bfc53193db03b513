//! Ethernet / IPv4 / TCP decoding of capture records, plus the inverse
//! builders used to synthesize traffic.

use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::dnp3::{self, Dnp3Error, Dnp3Frame};
use crate::pcap::CaptureRecord;

pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const ETHERTYPE_ARP: u16 = 0x0806;
pub const ETH_HEADER_LEN: usize = 14;
pub const DNP3_PORT: u16 = 20000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IpProto {
    Tcp,
    Udp,
    Icmp,
}

impl IpProto {
    pub fn number(self) -> u8 {
        match self {
            IpProto::Icmp => 1,
            IpProto::Tcp => 6,
            IpProto::Udp => 17,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IpProto::Tcp => "tcp",
            IpProto::Udp => "udp",
            IpProto::Icmp => "icmp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TcpFlags(pub u8);

impl TcpFlags {
    pub const FIN: u8 = 0x01;
    pub const SYN: u8 = 0x02;
    pub const RST: u8 = 0x04;
    pub const PSH: u8 = 0x08;
    pub const ACK: u8 = 0x10;

    pub fn syn(self) -> bool {
        self.0 & Self::SYN != 0
    }
    pub fn ack(self) -> bool {
        self.0 & Self::ACK != 0
    }
    pub fn fin(self) -> bool {
        self.0 & Self::FIN != 0
    }
    pub fn rst(self) -> bool {
        self.0 & Self::RST != 0
    }
}

impl fmt::Display for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (bit, c) in [(Self::SYN, 'S'), (Self::ACK, 'A'), (Self::FIN, 'F'), (Self::RST, 'R'), (Self::PSH, 'P')] {
            if self.0 & bit != 0 {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

/// A DNP3 candidate payload that did not yield a complete frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MalformedDnp3 {
    pub offset: usize,
    pub error: Dnp3Error,
    /// Header CRC check over the first ten octets at `offset`, when present.
    pub header_crc_valid: Option<bool>,
}

/// One decoded IPv4 packet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPacket {
    pub ts_us: u64,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub proto: IpProto,
    /// Zero for ICMP.
    pub src_port: u16,
    pub dst_port: u16,
    pub tcp_flags: TcpFlags,
    pub tcp_seq: u32,
    pub tcp_ack: u32,
    /// Transport payload (TCP/UDP data, or ICMP data after the 8-octet header).
    pub payload: Vec<u8>,
    pub dnp3: Vec<Dnp3Frame>,
    pub dnp3_malformed: Option<MalformedDnp3>,
}

impl ParsedPacket {
    pub fn is_tcp(&self) -> bool {
        self.proto == IpProto::Tcp
    }

    /// First DNP3 frame carried by the segment.
    pub fn dnp3(&self) -> Option<&Dnp3Frame> {
        self.dnp3.first()
    }

    pub fn dnp3_function(&self) -> Option<u8> {
        self.dnp3().and_then(|f| f.function_code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SkipReason {
    TruncatedEthernet,
    NotIpv4,
    BadIpv4Header,
    IpFragment,
    UnsupportedProtocol,
    BadTransportHeader,
}

impl SkipReason {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipReason::TruncatedEthernet => "truncated_ethernet",
            SkipReason::NotIpv4 => "not_ipv4",
            SkipReason::BadIpv4Header => "bad_ipv4_header",
            SkipReason::IpFragment => "ip_fragment",
            SkipReason::UnsupportedProtocol => "unsupported_protocol",
            SkipReason::BadTransportHeader => "bad_transport_header",
        }
    }
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ports whose TCP payloads are always treated as DNP3 candidates, even when
/// the start octets are damaged.
#[derive(Debug, Clone)]
pub struct DecodeOptions {
    pub dnp3_ports: Vec<u16>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self { dnp3_ports: vec![DNP3_PORT] }
    }
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

fn be32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

struct Ipv4View<'a> {
    src: Ipv4Addr,
    dst: Ipv4Addr,
    proto: u8,
    body: &'a [u8],
}

fn ipv4_view(data: &[u8]) -> Result<(usize, Ipv4View<'_>), SkipReason> {
    if data.len() < ETH_HEADER_LEN {
        return Err(SkipReason::TruncatedEthernet);
    }
    if be16(data, 12) != ETHERTYPE_IPV4 {
        return Err(SkipReason::NotIpv4);
    }
    let ip = &data[ETH_HEADER_LEN..];
    if ip.len() < 20 || ip[0] >> 4 != 4 {
        return Err(SkipReason::BadIpv4Header);
    }
    let ihl = (ip[0] & 0x0F) as usize * 4;
    let total = be16(ip, 2) as usize;
    if ihl < 20 || total < ihl || total > ip.len() {
        return Err(SkipReason::BadIpv4Header);
    }
    let frag = be16(ip, 6);
    if frag & 0x2000 != 0 || frag & 0x1FFF != 0 {
        return Err(SkipReason::IpFragment);
    }
    Ok((
        ETH_HEADER_LEN + ihl,
        Ipv4View {
            src: Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]),
            dst: Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]),
            proto: ip[9],
            body: &ip[ihl..total],
        },
    ))
}

/// Decodes a capture record. Never fails hard: anything undecodable becomes
/// a [`SkipReason`].
pub fn decode_packet(record: &CaptureRecord, opts: &DecodeOptions) -> Result<ParsedPacket, SkipReason> {
    let (_, ip) = ipv4_view(&record.data)?;
    let body = ip.body;
    let mut pkt = ParsedPacket {
        ts_us: record.ts_us,
        src_ip: ip.src,
        dst_ip: ip.dst,
        proto: IpProto::Tcp,
        src_port: 0,
        dst_port: 0,
        tcp_flags: TcpFlags(0),
        tcp_seq: 0,
        tcp_ack: 0,
        payload: Vec::new(),
        dnp3: Vec::new(),
        dnp3_malformed: None,
    };
    match ip.proto {
        6 => {
            if body.len() < 20 {
                return Err(SkipReason::BadTransportHeader);
            }
            let data_offset = (body[12] >> 4) as usize * 4;
            if data_offset < 20 || data_offset > body.len() {
                return Err(SkipReason::BadTransportHeader);
            }
            pkt.src_port = be16(body, 0);
            pkt.dst_port = be16(body, 2);
            pkt.tcp_seq = be32(body, 4);
            pkt.tcp_ack = be32(body, 8);
            pkt.tcp_flags = TcpFlags(body[13]);
            pkt.payload = body[data_offset..].to_vec();
            let on_dnp3_port = opts.dnp3_ports.contains(&pkt.src_port) || opts.dnp3_ports.contains(&pkt.dst_port);
            if pkt.payload.starts_with(&dnp3::START_OCTETS) || (on_dnp3_port && !pkt.payload.is_empty()) {
                parse_dnp3_segment(&mut pkt);
            }
        }
        17 => {
            if body.len() < 8 {
                return Err(SkipReason::BadTransportHeader);
            }
            pkt.proto = IpProto::Udp;
            pkt.src_port = be16(body, 0);
            pkt.dst_port = be16(body, 2);
            pkt.payload = body[8..].to_vec();
        }
        1 => {
            if body.len() < 8 {
                return Err(SkipReason::BadTransportHeader);
            }
            pkt.proto = IpProto::Icmp;
            pkt.payload = body[8..].to_vec();
        }
        _ => return Err(SkipReason::UnsupportedProtocol),
    }
    Ok(pkt)
}

fn parse_dnp3_segment(pkt: &mut ParsedPacket) {
    let mut offset = 0;
    while offset < pkt.payload.len() {
        let rest = &pkt.payload[offset..];
        match dnp3::parse_frame(rest) {
            Ok(frame) => {
                offset += frame.wire_len();
                pkt.dnp3.push(frame);
            }
            Err(error) => {
                pkt.dnp3_malformed =
                    Some(MalformedDnp3 { offset, error, header_crc_valid: dnp3::header_crc_valid(rest) });
                break;
            }
        }
    }
}

/// Byte range of the TCP payload inside an Ethernet frame, when the frame is
/// IPv4/TCP.
pub fn tcp_payload_range(data: &[u8]) -> Option<std::ops::Range<usize>> {
    let (l4, ip) = ipv4_view(data).ok()?;
    if ip.proto != 6 || ip.body.len() < 20 {
        return None;
    }
    let data_offset = (ip.body[12] >> 4) as usize * 4;
    if data_offset < 20 || data_offset > ip.body.len() {
        return None;
    }
    Some(l4 + data_offset..l4 + ip.body.len())
}

fn ones_complement_sum(mut sum: u32, bytes: &[u8]) -> u32 {
    let mut chunks = bytes.chunks_exact(2);
    for c in &mut chunks {
        sum += u16::from_be_bytes([c[0], c[1]]) as u32;
    }
    if let [last] = chunks.remainder() {
        sum += (*last as u32) << 8;
    }
    sum
}

fn fold(mut sum: u32) -> u16 {
    while sum > 0xFFFF {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    !(sum as u16)
}

pub fn ipv4_checksum(header: &[u8]) -> u16 {
    fold(ones_complement_sum(0, header))
}

fn transport_checksum(src: Ipv4Addr, dst: Ipv4Addr, proto: u8, segment: &[u8]) -> u16 {
    let mut pseudo = Vec::with_capacity(12);
    pseudo.extend_from_slice(&src.octets());
    pseudo.extend_from_slice(&dst.octets());
    pseudo.push(0);
    pseudo.push(proto);
    pseudo.extend_from_slice(&(segment.len() as u16).to_be_bytes());
    fold(ones_complement_sum(ones_complement_sum(0, &pseudo), segment))
}

/// Recomputes the TCP checksum of an Ethernet/IPv4/TCP frame in place.
/// Returns false if the frame is not IPv4/TCP.
pub fn recompute_tcp_checksum(data: &mut [u8]) -> bool {
    let (l4, src, dst, end) = match ipv4_view(data) {
        Ok((l4, ip)) if ip.proto == 6 && ip.body.len() >= 20 => (l4, ip.src, ip.dst, l4 + ip.body.len()),
        _ => return false,
    };
    data[l4 + 16] = 0;
    data[l4 + 17] = 0;
    let sum = transport_checksum(src, dst, 6, &data[l4..end]);
    data[l4 + 16..l4 + 18].copy_from_slice(&sum.to_be_bytes());
    true
}

/// Verifies the TCP checksum of an Ethernet/IPv4/TCP frame.
pub fn tcp_checksum_valid(data: &[u8]) -> Option<bool> {
    let (_, ip) = ipv4_view(data).ok()?;
    if ip.proto != 6 {
        return None;
    }
    let mut pseudo = Vec::with_capacity(12);
    pseudo.extend_from_slice(&ip.src.octets());
    pseudo.extend_from_slice(&ip.dst.octets());
    pseudo.push(0);
    pseudo.push(6);
    pseudo.extend_from_slice(&(ip.body.len() as u16).to_be_bytes());
    Some(fold(ones_complement_sum(ones_complement_sum(0, &pseudo), ip.body)) == 0)
}

/// Locally administered MAC derived from an IPv4 address.
pub fn mac_for(ip: Ipv4Addr) -> [u8; 6] {
    let o = ip.octets();
    [0x02, 0x00, o[0], o[1], o[2], o[3]]
}

fn ethernet_ipv4(src: Ipv4Addr, dst: Ipv4Addr, proto: u8, ident: u16, l4: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(ETH_HEADER_LEN + 20 + l4.len());
    out.extend_from_slice(&mac_for(dst));
    out.extend_from_slice(&mac_for(src));
    out.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
    let mut ip = [0u8; 20];
    ip[0] = 0x45;
    ip[2..4].copy_from_slice(&((20 + l4.len()) as u16).to_be_bytes());
    ip[4..6].copy_from_slice(&ident.to_be_bytes());
    ip[6] = 0x40; // DF
    ip[8] = 64;
    ip[9] = proto;
    ip[12..16].copy_from_slice(&src.octets());
    ip[16..20].copy_from_slice(&dst.octets());
    let sum = ipv4_checksum(&ip);
    ip[10..12].copy_from_slice(&sum.to_be_bytes());
    out.extend_from_slice(&ip);
    out.extend_from_slice(l4);
    out
}

/// Fields of a TCP segment to build.
#[derive(Debug, Clone)]
pub struct TcpSegment<'a> {
    pub src: (Ipv4Addr, u16),
    pub dst: (Ipv4Addr, u16),
    pub seq: u32,
    pub ack: u32,
    pub flags: u8,
    pub window: u16,
    pub ident: u16,
    pub payload: &'a [u8],
}

pub fn build_tcp(seg: &TcpSegment<'_>) -> Vec<u8> {
    let mut tcp = Vec::with_capacity(20 + seg.payload.len());
    tcp.extend_from_slice(&seg.src.1.to_be_bytes());
    tcp.extend_from_slice(&seg.dst.1.to_be_bytes());
    tcp.extend_from_slice(&seg.seq.to_be_bytes());
    tcp.extend_from_slice(&seg.ack.to_be_bytes());
    tcp.push(5 << 4);
    tcp.push(seg.flags);
    tcp.extend_from_slice(&seg.window.to_be_bytes());
    tcp.extend_from_slice(&[0, 0, 0, 0]);
    tcp.extend_from_slice(seg.payload);
    let sum = transport_checksum(seg.src.0, seg.dst.0, 6, &tcp);
    tcp[16..18].copy_from_slice(&sum.to_be_bytes());
    ethernet_ipv4(seg.src.0, seg.dst.0, 6, seg.ident, &tcp)
}

pub fn build_icmp_echo(src: Ipv4Addr, dst: Ipv4Addr, id: u16, seq: u16, data: &[u8]) -> Vec<u8> {
    let mut icmp = vec![8, 0, 0, 0];
    icmp.extend_from_slice(&id.to_be_bytes());
    icmp.extend_from_slice(&seq.to_be_bytes());
    icmp.extend_from_slice(data);
    let sum = fold(ones_complement_sum(0, &icmp));
    icmp[2..4].copy_from_slice(&sum.to_be_bytes());
    ethernet_ipv4(src, dst, 1, seq, &icmp)
}

/// Gratuitous ARP announcement, used as non-IP filler.
pub fn build_arp(sender: Ipv4Addr) -> Vec<u8> {
    let mut out = Vec::with_capacity(42);
    out.extend_from_slice(&[0xFF; 6]);
    out.extend_from_slice(&mac_for(sender));
    out.extend_from_slice(&ETHERTYPE_ARP.to_be_bytes());
    out.extend_from_slice(&[0, 1, 8, 0, 6, 4, 0, 1]);
    out.extend_from_slice(&mac_for(sender));
    out.extend_from_slice(&sender.octets());
    out.extend_from_slice(&[0; 6]);
    out.extend_from_slice(&sender.octets());
    out
}
