//! Deterministic benign and attack captures.

use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dnp3::{encode_frame, fc, Dnp3Frame, LINK_HEADER_LEN, START_OCTETS};
use crate::packet::{build_icmp_echo, build_tcp, recompute_tcp_checksum, tcp_payload_range, TcpFlags, TcpSegment};
use crate::pcap::CaptureRecord;

/// Class 1/2/3 event poll followed by a class 0 integrity poll.
pub const POLL_OBJECTS: [u8; 12] = [0x3C, 0x02, 0x06, 0x3C, 0x03, 0x06, 0x3C, 0x04, 0x06, 0x3C, 0x01, 0x06];
/// One analog input with flags, value and padding.
pub const RESPONSE_OBJECTS: [u8; 12] = [0x1E, 0x01, 0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x2A, 0x00, 0x00];
/// Control relay output block on point 0: latch on, one pulse.
pub const CROB: [u8; 17] =
    [0x0C, 0x01, 0x28, 0x01, 0x00, 0x00, 0x00, 0x03, 0x01, 0xE8, 0x03, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00];

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub master_ip: Ipv4Addr,
    pub master_port: u16,
    pub outstation_ip: Ipv4Addr,
    pub outstation_port: u16,
    pub master_addr: u16,
    pub outstation_addr: u16,
    pub attacker_ip: Ipv4Addr,
    pub attacker_port: u16,
    pub start_us: u64,
    /// Poll cycles per second.
    pub rate_hz: f64,
    /// Number of poll cycles.
    pub count: u32,
    pub seed: u64,
    /// Replace some polls with select/operate pairs on consecutive cycles.
    pub sbo_cycle: bool,
    /// Attack frames carry the master's IP address as their source.
    pub spoof: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            master_ip: Ipv4Addr::new(10, 0, 0, 1),
            master_port: 49152,
            outstation_ip: Ipv4Addr::new(10, 0, 0, 2),
            outstation_port: 20000,
            master_addr: 1,
            outstation_addr: 10,
            attacker_ip: Ipv4Addr::new(10, 0, 0, 66),
            attacker_port: 51000,
            start_us: 1_700_000_000_000_000,
            rate_hz: 1.0,
            count: 100,
            seed: 0x5EED,
            sbo_cycle: false,
            spoof: false,
        }
    }
}

impl ScenarioConfig {
    /// Records emitted by [`synth_benign`]: handshake, two per cycle, teardown.
    pub fn benign_record_count(&self) -> usize {
        6 + 2 * self.count as usize
    }

    fn period_us(&self) -> u64 {
        (1_000_000.0 / self.rate_hz).round().max(1.0) as u64
    }

    fn cycle_time(&self, i: u32) -> u64 {
        self.start_us + HANDSHAKE_SPAN_US + i as u64 * self.period_us()
    }
}

const HANDSHAKE_SPAN_US: u64 = 1_000;
const RESPONSE_DELAY_US: u64 = 20_000;
const STEP_US: u64 = 100;

/// One TCP connection being written out segment by segment.
struct Session {
    client: (Ipv4Addr, u16),
    server: (Ipv4Addr, u16),
    client_seq: u32,
    server_seq: u32,
    ident: u16,
}

impl Session {
    fn new(client: (Ipv4Addr, u16), server: (Ipv4Addr, u16), rng: &mut ChaCha8Rng) -> Self {
        Self { client, server, client_seq: rng.gen(), server_seq: rng.gen(), ident: rng.gen() }
    }

    fn segment(&mut self, from_client: bool, flags: u8, payload: &[u8], ts: u64) -> CaptureRecord {
        let (src, dst, seq, ack) = if from_client {
            (self.client, self.server, self.client_seq, self.server_seq)
        } else {
            (self.server, self.client, self.server_seq, self.client_seq)
        };
        self.ident = self.ident.wrapping_add(1);
        let data = build_tcp(&TcpSegment {
            src,
            dst,
            seq,
            ack: if flags & TcpFlags::ACK != 0 { ack } else { 0 },
            flags,
            window: 8192,
            ident: self.ident,
            payload,
        });
        let advance = payload.len() as u32 + (flags & TcpFlags::SYN != 0) as u32 + (flags & TcpFlags::FIN != 0) as u32;
        if from_client {
            self.client_seq = self.client_seq.wrapping_add(advance);
        } else {
            self.server_seq = self.server_seq.wrapping_add(advance);
        }
        CaptureRecord::new(ts, data)
    }

    fn open(&mut self, ts: u64) -> Vec<CaptureRecord> {
        vec![
            self.segment(true, TcpFlags::SYN, &[], ts),
            self.segment(false, TcpFlags::SYN | TcpFlags::ACK, &[], ts + STEP_US),
            self.segment(true, TcpFlags::ACK, &[], ts + 2 * STEP_US),
        ]
    }

    fn close(&mut self, ts: u64) -> Vec<CaptureRecord> {
        vec![
            self.segment(true, TcpFlags::FIN | TcpFlags::ACK, &[], ts),
            self.segment(false, TcpFlags::FIN | TcpFlags::ACK, &[], ts + STEP_US),
            self.segment(true, TcpFlags::ACK, &[], ts + 2 * STEP_US),
        ]
    }

    fn send(&mut self, payload: &[u8], ts: u64) -> CaptureRecord {
        self.segment(true, TcpFlags::PSH | TcpFlags::ACK, payload, ts)
    }

    fn reply(&mut self, payload: &[u8], ts: u64) -> CaptureRecord {
        self.segment(false, TcpFlags::PSH | TcpFlags::ACK, payload, ts)
    }
}

fn encode(frame: &Dnp3Frame) -> Vec<u8> {
    encode_frame(frame).expect("synthesized frames fit one link frame")
}

fn request_for_cycle(cfg: &ScenarioConfig, i: u32) -> (u8, Vec<u8>) {
    if cfg.sbo_cycle {
        match i % 10 {
            0 if i + 1 < cfg.count => return (fc::SELECT, CROB.to_vec()),
            1 => return (fc::OPERATE, CROB.to_vec()),
            _ => {}
        }
    }
    (fc::READ, POLL_OBJECTS.to_vec())
}

/// Handshake, `count` poll/response cycles at `rate_hz`, FIN teardown.
pub fn synth_benign(cfg: &ScenarioConfig) -> Vec<CaptureRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut s = Session::new((cfg.master_ip, cfg.master_port), (cfg.outstation_ip, cfg.outstation_port), &mut rng);
    let mut out = s.open(cfg.start_us);
    for i in 0..cfg.count {
        let t = cfg.cycle_time(i);
        let seq = (i % 64) as u8;
        let (code, objects) = request_for_cycle(cfg, i);
        let req = Dnp3Frame::request(cfg.outstation_addr, cfg.master_addr, code, objects).with_sequences(seq, seq);
        out.push(s.send(&encode(&req), t));
        let body = if code == fc::READ { RESPONSE_OBJECTS.to_vec() } else { CROB.to_vec() };
        let resp = Dnp3Frame::response(cfg.master_addr, cfg.outstation_addr, 0x0000, body).with_sequences(seq, seq);
        out.push(s.reply(&encode(&resp), t + RESPONSE_DELAY_US));
    }
    let end = cfg.cycle_time(cfg.count.saturating_sub(1)) + RESPONSE_DELAY_US + 10_000;
    out.extend(s.close(end.max(cfg.start_us + HANDSHAKE_SPAN_US)));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttackKind {
    SelectOperateReplay,
    DirectOperate,
    BroadcastRequest,
    DisableUnsolicited,
    StopApplication,
    ColdRestart,
}

impl AttackKind {
    pub const ALL: [AttackKind; 6] = [
        AttackKind::SelectOperateReplay,
        AttackKind::DirectOperate,
        AttackKind::BroadcastRequest,
        AttackKind::DisableUnsolicited,
        AttackKind::StopApplication,
        AttackKind::ColdRestart,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::SelectOperateReplay => "select_operate_replay",
            AttackKind::DirectOperate => "direct_operate",
            AttackKind::BroadcastRequest => "broadcast_request",
            AttackKind::DisableUnsolicited => "disable_unsolicited",
            AttackKind::StopApplication => "stop_application",
            AttackKind::ColdRestart => "cold_restart",
        }
    }

    /// Background used under this attack; the replay needs a select/operate
    /// exchange to copy.
    pub fn background(self, cfg: &ScenarioConfig) -> ScenarioConfig {
        ScenarioConfig { sbo_cycle: cfg.sbo_cycle || self == AttackKind::SelectOperateReplay, ..cfg.clone() }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttackKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown attack `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackCapture {
    pub records: Vec<CaptureRecord>,
    /// Indices into `records` of everything the attacker sent or caused.
    pub injected: Vec<usize>,
}

impl AttackCapture {
    /// The capture with every injected record removed.
    pub fn without_injected(&self) -> Vec<CaptureRecord> {
        self.records
            .iter()
            .enumerate()
            .filter(|(i, _)| self.injected.binary_search(i).is_err())
            .map(|(_, r)| r.clone())
            .collect()
    }
}

/// Stable merge by timestamp; background records win ties.
fn merge(background: Vec<CaptureRecord>, injected: Vec<CaptureRecord>) -> AttackCapture {
    let mut records = Vec::with_capacity(background.len() + injected.len());
    let mut marks = Vec::new();
    let mut inj = injected.into_iter().peekable();
    for b in background {
        while inj.peek().is_some_and(|r| r.ts_us < b.ts_us) {
            marks.push(records.len());
            records.push(inj.next().expect("peeked"));
        }
        records.push(b);
    }
    for r in inj {
        marks.push(records.len());
        records.push(r);
    }
    AttackCapture { records, injected: marks }
}

fn attacker_frames(kind: AttackKind, cfg: &ScenarioConfig, background: &[CaptureRecord]) -> Vec<Vec<u8>> {
    let request = |code: u8, dst: u16, objects: &[u8]| {
        encode(&Dnp3Frame::request(dst, cfg.master_addr, code, objects.to_vec()).with_sequences(0, 0))
    };
    match kind {
        AttackKind::SelectOperateReplay => {
            let mut sniffed = Vec::new();
            for code in [fc::SELECT, fc::OPERATE] {
                let hit = background.iter().find_map(|r| {
                    let range = tcp_payload_range(&r.data)?;
                    let p = &r.data[range];
                    (p.len() > 12 && p[..2] == START_OCTETS && p[3] & 0x80 != 0 && p[12] == code).then(|| p.to_vec())
                });
                sniffed.push(hit.unwrap_or_else(|| request(code, cfg.outstation_addr, &CROB)));
            }
            sniffed
        }
        AttackKind::DirectOperate => vec![request(fc::DIRECT_OPERATE, cfg.outstation_addr, &CROB)],
        AttackKind::BroadcastRequest => vec![request(fc::OPERATE, 0xFFFF, &CROB)],
        AttackKind::DisableUnsolicited => {
            vec![request(fc::DISABLE_UNSOLICITED, cfg.outstation_addr, &POLL_OBJECTS[..9])]
        }
        AttackKind::StopApplication => vec![request(fc::STOP_APPLICATION, cfg.outstation_addr, &[])],
        AttackKind::ColdRestart => vec![request(fc::COLD_RESTART, cfg.outstation_addr, &[])],
    }
}

/// Benign background with an attacker session carrying the attack frames
/// midway through it.
pub fn synth_attack(kind: AttackKind, cfg: &ScenarioConfig) -> AttackCapture {
    let bg_cfg = kind.background(cfg);
    let background = synth_benign(&bg_cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA77A_C4E5 ^ kind as u64);
    let source = if cfg.spoof { cfg.master_ip } else { cfg.attacker_ip };
    let mut s = Session::new((source, cfg.attacker_port), (cfg.outstation_ip, cfg.outstation_port), &mut rng);
    let t0 = bg_cfg.cycle_time(bg_cfg.count / 2) + bg_cfg.period_us() / 2;
    let mut injected = s.open(t0);
    let mut t = t0 + 10 * STEP_US;
    for frame in attacker_frames(kind, &bg_cfg, &background) {
        injected.push(s.send(&frame, t));
        t += 10 * STEP_US;
    }
    injected.extend(s.close(t));
    merge(background, injected)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FloodKind {
    Dnp3Flood,
    SynFlood,
    PortScan,
}

impl std::str::FromStr for FloodKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dnp3_flood" => Ok(FloodKind::Dnp3Flood),
            "syn_flood" => Ok(FloodKind::SynFlood),
            "port_scan" => Ok(FloodKind::PortScan),
            _ => Err(format!("unknown flood `{s}`")),
        }
    }
}

/// Attacker-only traffic. `dnp3_flood` sends `count` reads evenly spaced
/// inside `seconds` over an established session.
pub fn synth_flood(kind: FloodKind, cfg: &ScenarioConfig, count: u32, seconds: u32) -> Vec<CaptureRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xF100D);
    let server = (cfg.outstation_ip, cfg.outstation_port);
    match kind {
        FloodKind::Dnp3Flood => {
            let mut s = Session::new((cfg.attacker_ip, cfg.attacker_port), server, &mut rng);
            let mut out = s.open(cfg.start_us);
            let t0 = cfg.start_us + HANDSHAKE_SPAN_US;
            let spacing = seconds as u64 * 1_000_000 / count.max(1) as u64;
            for i in 0..count {
                let seq = (i % 16) as u8;
                let frame = Dnp3Frame::request(cfg.outstation_addr, cfg.master_addr, fc::READ, POLL_OBJECTS.to_vec())
                    .with_sequences(seq, seq);
                out.push(s.send(&encode(&frame), t0 + i as u64 * spacing));
            }
            out.extend(s.close(t0 + count as u64 * spacing + HANDSHAKE_SPAN_US));
            out
        }
        FloodKind::SynFlood => (0..count)
            .map(|i| {
                let port = 1024 + (rng.gen::<u16>() % 60_000);
                let mut s = Session::new((cfg.attacker_ip, port), server, &mut rng);
                s.segment(true, TcpFlags::SYN, &[], cfg.start_us + i as u64 * 1_000)
            })
            .collect(),
        FloodKind::PortScan => (0..count)
            .map(|i| {
                let target = (cfg.outstation_ip, 1 + i as u16);
                let mut s = Session::new((cfg.attacker_ip, cfg.attacker_port), target, &mut rng);
                s.segment(true, TcpFlags::SYN, &[], cfg.start_us + i as u64 * 1_000)
            })
            .collect(),
    }
}

/// ICMP echo requests from the attacker to the outstation, 1 ms apart.
pub fn synth_ping(cfg: &ScenarioConfig, count: u32) -> Vec<CaptureRecord> {
    (0..count)
        .map(|i| {
            CaptureRecord::new(
                cfg.start_us + i as u64 * 1_000,
                build_icmp_echo(cfg.attacker_ip, cfg.outstation_ip, 0x1D5, i as u16, &[0xAB; 32]),
            )
        })
        .collect()
}

/// Attacker traffic touching each category of a mixed rule set: two pings,
/// a session handshake, one Operate, then `reads` Reads 100 ms apart.
pub fn synth_mixed_attack(cfg: &ScenarioConfig, reads: u32) -> Vec<CaptureRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xB3AC);
    let mut out = synth_ping(cfg, 2);
    let mut s = Session::new((cfg.attacker_ip, cfg.attacker_port), (cfg.outstation_ip, cfg.outstation_port), &mut rng);
    let mut t = cfg.start_us + HANDSHAKE_SPAN_US * 10;
    out.extend(s.open(t));
    t += HANDSHAKE_SPAN_US;
    let operate = Dnp3Frame::request(cfg.outstation_addr, cfg.master_addr, fc::OPERATE, CROB.to_vec());
    out.push(s.send(&encode(&operate), t));
    for i in 0..reads {
        let seq = ((i + 1) % 16) as u8;
        let frame = Dnp3Frame::request(cfg.outstation_addr, cfg.master_addr, fc::READ, POLL_OBJECTS.to_vec())
            .with_sequences(seq, seq);
        t += 100_000;
        out.push(s.send(&encode(&frame), t));
    }
    out.extend(s.close(t + HANDSHAKE_SPAN_US));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrcSite {
    Header,
    Body,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SynthError {
    #[error("record {0} does not carry a DNP3 frame")]
    IndexNotDnp3(usize),
    #[error("record {0} carries a DNP3 frame without user data")]
    NoBody(usize),
}

/// Flips one bit in the octets covered by the chosen CRC block of the first
/// frame in `records[index]`, then fixes the TCP checksum.
pub fn corrupt_crc(records: &[CaptureRecord], index: usize, site: CrcSite) -> Result<Vec<CaptureRecord>, SynthError> {
    let record = records.get(index).ok_or(SynthError::IndexNotDnp3(index))?;
    let range = tcp_payload_range(&record.data).ok_or(SynthError::IndexNotDnp3(index))?;
    let payload = &record.data[range.clone()];
    if payload.len() < LINK_HEADER_LEN || payload[..2] != START_OCTETS {
        return Err(SynthError::IndexNotDnp3(index));
    }
    let offset = match site {
        // Low octet of the source address.
        CrcSite::Header => 6,
        CrcSite::Body if payload.len() > LINK_HEADER_LEN + 2 && payload[2] > 5 => LINK_HEADER_LEN,
        CrcSite::Body => return Err(SynthError::NoBody(index)),
    };
    let mut out = records.to_vec();
    let data = &mut out[index].data;
    data[range.start + offset] ^= 0x01;
    recompute_tcp_checksum(data);
    Ok(out)
}
