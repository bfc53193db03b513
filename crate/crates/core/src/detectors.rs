//! Protocol-aware checks that content signatures cannot express.
//!
//! Every check reports under gid 145 with a fixed sid so that a rule file
//! can bind, reorder or suppress it like any other rule.

use std::collections::{HashMap, VecDeque};
use std::net::Ipv4Addr;

use ipnet::Ipv4Net;

use crate::dnp3::{fc, BroadcastSet, Dnp3Frame, FunctionSet};
use crate::flow::FlowVerdict;
use crate::packet::{MalformedDnp3, ParsedPacket};
use crate::rules::PREPROC_GID;

pub mod sid {
    pub const BAD_CRC: u32 = 1;
    pub const INVALID_SEQUENCE: u32 = 3;
    pub const OPERATE_WITHOUT_SELECT: u32 = 10;
    pub const UNAUTHORIZED_DIRECT_OPERATE: u32 = 11;
    pub const BROADCAST_CRITICAL: u32 = 12;
    pub const DISABLE_UNSOLICITED_UNKNOWN: u32 = 13;
    pub const STOP_APPLICATION_UNKNOWN: u32 = 14;
    pub const COLD_RESTART_UNKNOWN: u32 = 15;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PreprocAlert {
    pub gid: u32,
    pub sid: u32,
    pub msg: &'static str,
}

impl PreprocAlert {
    pub const fn new(sid: u32, msg: &'static str) -> Self {
        Self { gid: PREPROC_GID, sid, msg }
    }
}

pub const BAD_CRC: PreprocAlert = PreprocAlert::new(sid::BAD_CRC, "DNP3-Bad-CRC");
pub const INVALID_SEQUENCE: PreprocAlert = PreprocAlert::new(sid::INVALID_SEQUENCE, "DNP3-Invalid sequence no");
pub const OPERATE_WITHOUT_SELECT: PreprocAlert =
    PreprocAlert::new(sid::OPERATE_WITHOUT_SELECT, "Operate without Select");
pub const UNAUTHORIZED_DIRECT_OPERATE: PreprocAlert =
    PreprocAlert::new(sid::UNAUTHORIZED_DIRECT_OPERATE, "Unauthorized direct operate");
pub const BROADCAST_CRITICAL: PreprocAlert = PreprocAlert::new(sid::BROADCAST_CRITICAL, "Broadcast critical request");
pub const DISABLE_UNSOLICITED_UNKNOWN: PreprocAlert =
    PreprocAlert::new(sid::DISABLE_UNSOLICITED_UNKNOWN, "Disable unsolicited from unknown source");
pub const STOP_APPLICATION_UNKNOWN: PreprocAlert =
    PreprocAlert::new(sid::STOP_APPLICATION_UNKNOWN, "Stop application from unknown source");
pub const COLD_RESTART_UNKNOWN: PreprocAlert =
    PreprocAlert::new(sid::COLD_RESTART_UNKNOWN, "Cold restart from unknown source");

/// Every check this module can raise, in sid order.
pub const ALL: [PreprocAlert; 8] = [
    BAD_CRC,
    INVALID_SEQUENCE,
    OPERATE_WITHOUT_SELECT,
    UNAUTHORIZED_DIRECT_OPERATE,
    BROADCAST_CRITICAL,
    DISABLE_UNSOLICITED_UNKNOWN,
    STOP_APPLICATION_UNKNOWN,
    COLD_RESTART_UNKNOWN,
];

pub fn check_frame_crc(frame: &Dnp3Frame) -> Option<PreprocAlert> {
    (!frame.crc.all_valid()).then_some(BAD_CRC)
}

/// A candidate frame that failed to parse still has a checkable header.
pub fn check_malformed_crc(m: &MalformedDnp3) -> Option<PreprocAlert> {
    (m.header_crc_valid == Some(false)).then_some(BAD_CRC)
}

pub fn check_tcp_sequence(verdict: &FlowVerdict) -> Option<PreprocAlert> {
    verdict.seq_anomaly.then_some(INVALID_SEQUENCE)
}

/// Set of IPv4 networks; an empty set contains nothing.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AddressSet(pub Vec<Ipv4Net>);

impl AddressSet {
    pub fn hosts(ips: &[Ipv4Addr]) -> Self {
        Self(ips.iter().map(|ip| Ipv4Net::new(*ip, 32).expect("prefix 32")).collect())
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        self.0.iter().any(|n| n.contains(&ip))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct SboKey {
    master: Ipv4Addr,
    outstation: u16,
    points: Vec<u8>,
}

/// Pending selects awaiting their operate.
#[derive(Debug, Clone)]
pub struct SboState {
    pub select_timeout_us: u64,
    /// Pair on addresses only, ignoring the selected points.
    pub loose: bool,
    pending: HashMap<SboKey, VecDeque<u64>>,
    pub selects: u64,
    pub consumed: u64,
    pub expired: u64,
}

impl SboState {
    pub fn new(select_timeout_us: u64, loose: bool) -> Self {
        Self { select_timeout_us, loose, pending: HashMap::new(), selects: 0, consumed: 0, expired: 0 }
    }

    pub fn pending(&self) -> usize {
        self.pending.values().map(VecDeque::len).sum()
    }

    fn purge(&mut self, now_us: u64) {
        let timeout = self.select_timeout_us;
        let mut expired = 0;
        self.pending.retain(|_, q| {
            while q.front().is_some_and(|&t| now_us.saturating_sub(t) > timeout) {
                q.pop_front();
                expired += 1;
            }
            !q.is_empty()
        });
        self.expired += expired;
    }

    fn key(&self, frame: &Dnp3Frame, src_ip: Ipv4Addr) -> SboKey {
        SboKey {
            master: src_ip,
            outstation: frame.link.destination,
            points: if self.loose { Vec::new() } else { frame.payload.clone() },
        }
    }

    /// Pairs operates with earlier selects. `frame` must be a request.
    pub fn track_select_operate(
        &mut self,
        frame: &Dnp3Frame,
        src_ip: Ipv4Addr,
        now_us: u64,
        authorized_masters: &AddressSet,
    ) -> Option<PreprocAlert> {
        let code = frame.function_code()?;
        match code {
            fc::SELECT => {
                self.purge(now_us);
                let key = self.key(frame, src_ip);
                self.pending.entry(key).or_default().push_back(now_us);
                self.selects += 1;
                None
            }
            fc::OPERATE => {
                self.purge(now_us);
                let key = self.key(frame, src_ip);
                let hit = match self.pending.get_mut(&key) {
                    Some(q) => {
                        q.pop_front();
                        if q.is_empty() {
                            self.pending.remove(&key);
                        }
                        true
                    }
                    None => false,
                };
                if hit {
                    self.consumed += 1;
                    None
                } else {
                    Some(OPERATE_WITHOUT_SELECT)
                }
            }
            fc::DIRECT_OPERATE | fc::DIRECT_OPERATE_NR if !authorized_masters.contains(src_ip) => {
                Some(UNAUTHORIZED_DIRECT_OPERATE)
            }
            _ => None,
        }
    }
}

/// Broadcast of a critical function, or a disruptive function from an
/// unauthorized source. `frame` must be a request.
pub fn screen_critical(
    frame: &Dnp3Frame,
    src_ip: Ipv4Addr,
    authorized_masters: &AddressSet,
    broadcast: &BroadcastSet,
    critical: &FunctionSet,
) -> Option<PreprocAlert> {
    let code = frame.function_code()?;
    if broadcast.contains(frame.link.destination) && critical.contains(code) {
        return Some(BROADCAST_CRITICAL);
    }
    if authorized_masters.contains(src_ip) {
        return None;
    }
    match code {
        fc::DISABLE_UNSOLICITED => Some(DISABLE_UNSOLICITED_UNKNOWN),
        fc::STOP_APPLICATION => Some(STOP_APPLICATION_UNKNOWN),
        fc::COLD_RESTART => Some(COLD_RESTART_UNKNOWN),
        _ => None,
    }
}

#[derive(Debug, Clone)]
pub struct DetectorConfig {
    pub authorized_masters: AddressSet,
    pub select_timeout_us: u64,
    pub loose_sbo: bool,
    pub critical: FunctionSet,
    pub broadcast: BroadcastSet,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            authorized_masters: AddressSet::default(),
            select_timeout_us: 10 * 1_000_000,
            loose_sbo: false,
            critical: FunctionSet::default(),
            broadcast: BroadcastSet::default(),
        }
    }
}

/// All detectors with the state they keep for one pipeline.
#[derive(Debug, Clone)]
pub struct Detectors {
    pub config: DetectorConfig,
    pub sbo: SboState,
}

impl Detectors {
    pub fn new(config: DetectorConfig) -> Self {
        let sbo = SboState::new(config.select_timeout_us, config.loose_sbo);
        Self { config, sbo }
    }

    /// Runs every check over one packet. Each (gid, sid) is reported at most
    /// once per packet, in first-seen order.
    pub fn inspect(&mut self, pkt: &ParsedPacket, verdict: Option<&FlowVerdict>, now_us: u64) -> Vec<PreprocAlert> {
        let mut out: Vec<PreprocAlert> = Vec::new();
        let mut push = |a: Option<PreprocAlert>| {
            if let Some(a) = a {
                if !out.contains(&a) {
                    out.push(a);
                }
            }
        };
        if let Some(v) = verdict {
            push(check_tcp_sequence(v));
        }
        for frame in &pkt.dnp3 {
            push(check_frame_crc(frame));
            if !frame.is_request() {
                continue;
            }
            push(self.sbo.track_select_operate(frame, pkt.src_ip, now_us, &self.config.authorized_masters));
            push(screen_critical(
                frame,
                pkt.src_ip,
                &self.config.authorized_masters,
                &self.config.broadcast,
                &self.config.critical,
            ));
        }
        if let Some(m) = &pkt.dnp3_malformed {
            push(check_malformed_crc(m));
        }
        out
    }
}

impl Default for Detectors {
    fn default() -> Self {
        Self::new(DetectorConfig::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dnp3::{encode_frame, parse_frame};
    use proptest::prelude::*;

    const MASTER: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 1);
    const ATTACKER: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 66);
    const CROB: [u8; 11] = [0x0C, 0x01, 0x28, 0x01, 0x00, 0x00, 0x00, 0x03, 0x01, 0x64, 0x00];

    fn masters() -> AddressSet {
        AddressSet::hosts(&[MASTER])
    }

    fn req(code: u8, dst: u16) -> Dnp3Frame {
        parse_frame(&encode_frame(&Dnp3Frame::request(dst, 1, code, CROB.to_vec())).unwrap()).unwrap()
    }

    #[test]
    fn crc_checks() {
        let good = req(fc::READ, 10);
        assert_eq!(check_frame_crc(&good), None);
        let mut bytes = encode_frame(&good).unwrap();
        bytes[4] ^= 0x01;
        assert_eq!(check_frame_crc(&parse_frame(&bytes).unwrap()), Some(BAD_CRC));
        let mut bytes = encode_frame(&good).unwrap();
        bytes[12] ^= 0x80;
        let body = parse_frame(&bytes).unwrap();
        assert!(body.crc.header);
        assert_eq!(check_frame_crc(&body), Some(BAD_CRC));
    }

    #[test]
    fn sequence_check_follows_verdict() {
        assert_eq!(check_tcp_sequence(&FlowVerdict::default()), None);
        let v = FlowVerdict { established: true, seq_anomaly: true, ..FlowVerdict::default() };
        assert_eq!(check_tcp_sequence(&v), Some(INVALID_SEQUENCE));
    }

    #[test]
    fn select_then_operate_pairs() {
        let mut s = SboState::new(10_000_000, false);
        assert_eq!(s.track_select_operate(&req(fc::SELECT, 10), MASTER, 0, &masters()), None);
        assert_eq!(s.track_select_operate(&req(fc::OPERATE, 10), MASTER, 2_000_000, &masters()), None);
        assert_eq!((s.selects, s.consumed, s.pending()), (1, 1, 0));
    }

    #[test]
    fn operate_alone_or_late_alerts() {
        let mut s = SboState::new(10_000_000, false);
        assert_eq!(s.track_select_operate(&req(fc::OPERATE, 10), MASTER, 0, &masters()), Some(OPERATE_WITHOUT_SELECT));
        s.track_select_operate(&req(fc::SELECT, 10), MASTER, 1_000_000, &masters());
        assert_eq!(
            s.track_select_operate(&req(fc::OPERATE, 10), MASTER, 12_000_000, &masters()),
            Some(OPERATE_WITHOUT_SELECT)
        );
        assert_eq!((s.selects, s.expired, s.consumed), (1, 1, 0));
    }

    #[test]
    fn operate_must_echo_selected_points_unless_loose() {
        let other = Dnp3Frame::request(10, 1, fc::OPERATE, vec![0x0C, 0x01]);
        for (loose, expect) in [(false, Some(OPERATE_WITHOUT_SELECT)), (true, None)] {
            let mut s = SboState::new(10_000_000, loose);
            s.track_select_operate(&req(fc::SELECT, 10), MASTER, 0, &masters());
            assert_eq!(s.track_select_operate(&other, MASTER, 1, &masters()), expect);
        }
    }

    #[test]
    fn direct_operate_needs_authorization() {
        let mut s = SboState::new(10_000_000, false);
        assert_eq!(s.track_select_operate(&req(fc::DIRECT_OPERATE, 10), MASTER, 0, &masters()), None);
        assert_eq!(
            s.track_select_operate(&req(fc::DIRECT_OPERATE_NR, 10), ATTACKER, 0, &masters()),
            Some(UNAUTHORIZED_DIRECT_OPERATE)
        );
        assert_eq!(s.track_select_operate(&req(fc::READ, 10), ATTACKER, 0, &masters()), None);
    }

    #[test]
    fn screening() {
        let bs = BroadcastSet::default();
        let cs = FunctionSet::default();
        let screen = |code, dst, src| screen_critical(&req(code, dst), src, &masters(), &bs, &cs);
        assert_eq!(screen(fc::OPERATE, 0xFFFF, MASTER), Some(BROADCAST_CRITICAL));
        assert_eq!(screen(fc::READ, 0xFFFF, ATTACKER), None);
        assert_eq!(screen(fc::DISABLE_UNSOLICITED, 10, ATTACKER), Some(DISABLE_UNSOLICITED_UNKNOWN));
        assert_eq!(screen(fc::DISABLE_UNSOLICITED, 10, MASTER), None);
        assert_eq!(screen(fc::STOP_APPLICATION, 10, ATTACKER), Some(STOP_APPLICATION_UNKNOWN));
        assert_eq!(screen(fc::COLD_RESTART, 10, ATTACKER), Some(COLD_RESTART_UNKNOWN));
        assert_eq!(screen(fc::READ, 10, ATTACKER), None);
    }

    #[test]
    fn sids_are_unique() {
        let mut sids: Vec<u32> = ALL.iter().map(|a| a.sid).collect();
        sids.dedup();
        assert_eq!(sids.len(), ALL.len());
        assert!(ALL.iter().all(|a| a.gid == 145));
    }

    proptest! {
        #[test]
        fn sbo_conservation(ops in proptest::collection::vec((0u8..3, 0u16..3, 0u64..4_000_000), 0..200), timeout in 1u64..8_000_000) {
            let mut s = SboState::new(timeout, false);
            let mut now = 0;
            for (op, dst, gap) in ops {
                now += gap;
                let code = [fc::SELECT, fc::OPERATE, fc::READ][op as usize];
                s.track_select_operate(&req(code, dst), MASTER, now, &masters());
            }
            prop_assert_eq!(s.selects - s.expired - s.consumed, s.pending() as u64);
        }
    }
}
