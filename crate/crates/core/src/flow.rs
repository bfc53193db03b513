//! Per-connection TCP handshake and sequence tracking.

use std::collections::HashMap;
use std::net::Ipv4Addr;

use crate::packet::ParsedPacket;

pub type Endpoint = (Ipv4Addr, u16);

/// Unordered connection key: the two endpoints, lower first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlowKey {
    pub low: Endpoint,
    pub high: Endpoint,
}

impl FlowKey {
    pub fn of(pkt: &ParsedPacket) -> Self {
        let a = (pkt.src_ip, pkt.src_port);
        let b = (pkt.dst_ip, pkt.dst_port);
        if a <= b {
            Self { low: a, high: b }
        } else {
            Self { low: b, high: a }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum HandshakePhase {
    None,
    SynSeen,
    SynAckSeen,
    Established,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowState {
    pub phase: HandshakePhase,
    /// Endpoint that sent the opening SYN, if observed.
    pub initiator: Option<Endpoint>,
    initiator_isn: u32,
    responder_isn: u32,
    /// Next expected sequence number from the initiator / responder.
    /// Defined only once established.
    pub expected_from_initiator: Option<u32>,
    pub expected_from_responder: Option<u32>,
    pub last_activity_us: u64,
}

impl FlowState {
    fn new(now: u64) -> Self {
        Self {
            phase: HandshakePhase::None,
            initiator: None,
            initiator_isn: 0,
            responder_isn: 0,
            expected_from_initiator: None,
            expected_from_responder: None,
            last_activity_us: now,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlowVerdict {
    pub established: bool,
    pub new_flow: bool,
    pub seq_anomaly: bool,
    /// True when the packet travels from the connection initiator (client)
    /// toward the server. Guessed from ports for midstream flows.
    pub to_server: bool,
}

#[derive(Debug, Clone)]
pub struct FlowConfig {
    /// Accepted distance beyond the expected sequence number, in octets.
    pub seq_window: u32,
    pub idle_timeout_us: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { seq_window: 65_535, idle_timeout_us: 300 * 1_000_000 }
    }
}

#[derive(Debug, Default)]
pub struct FlowTable {
    config: FlowConfig,
    flows: HashMap<FlowKey, FlowState>,
    updates: u64,
}

const SWEEP_EVERY: u64 = 4096;

fn segment_len(pkt: &ParsedPacket) -> u32 {
    pkt.payload.len() as u32 + pkt.tcp_flags.syn() as u32 + pkt.tcp_flags.fin() as u32
}

impl FlowTable {
    pub fn new(config: FlowConfig) -> Self {
        Self { config, flows: HashMap::new(), updates: 0 }
    }

    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    pub fn get(&self, key: &FlowKey) -> Option<&FlowState> {
        self.flows.get(key)
    }

    /// Drops flows idle for longer than the configured timeout.
    pub fn expire(&mut self, now_us: u64) {
        let timeout = self.config.idle_timeout_us;
        self.flows.retain(|_, f| now_us.saturating_sub(f.last_activity_us) <= timeout);
    }

    /// Advances the handshake state machine with a TCP packet and reports
    /// the flow verdict as of this packet.
    pub fn update(&mut self, pkt: &ParsedPacket) -> FlowVerdict {
        let now = pkt.ts_us;
        self.updates += 1;
        if self.updates.is_multiple_of(SWEEP_EVERY) {
            self.expire(now);
        }
        let key = FlowKey::of(pkt);
        let idle_timeout = self.config.idle_timeout_us;
        let mut new_flow = false;
        let flow = self.flows.entry(key).or_insert_with(|| {
            new_flow = true;
            FlowState::new(now)
        });
        if !new_flow && now.saturating_sub(flow.last_activity_us) > idle_timeout {
            *flow = FlowState::new(now);
            new_flow = true;
        }

        let from = (pkt.src_ip, pkt.src_port);
        let flags = pkt.tcp_flags;
        let before = flow.phase;

        // A fresh SYN on a closed or unknown connection restarts tracking.
        if flags.syn() && !flags.ack() && matches!(flow.phase, HandshakePhase::Closed | HandshakePhase::None) {
            if flow.phase == HandshakePhase::Closed {
                *flow = FlowState::new(now);
                new_flow = true;
            }
            flow.phase = HandshakePhase::SynSeen;
            flow.initiator = Some(from);
            flow.initiator_isn = pkt.tcp_seq;
        } else if flags.rst() {
            flow.phase = HandshakePhase::Closed;
        } else {
            match flow.phase {
                HandshakePhase::SynSeen if flags.syn() && flags.ack() && Some(from) != flow.initiator => {
                    flow.phase = HandshakePhase::SynAckSeen;
                    flow.responder_isn = pkt.tcp_seq;
                }
                HandshakePhase::SynAckSeen if flags.ack() && !flags.syn() && Some(from) == flow.initiator => {
                    flow.phase = HandshakePhase::Established;
                    flow.expected_from_initiator = Some(flow.initiator_isn.wrapping_add(1));
                    flow.expected_from_responder = Some(flow.responder_isn.wrapping_add(1));
                }
                _ => {}
            }
        }

        let mut seq_anomaly = false;
        if flow.phase == HandshakePhase::Established {
            let from_initiator = Some(from) == flow.initiator;
            let expected =
                if from_initiator { &mut flow.expected_from_initiator } else { &mut flow.expected_from_responder };
            if let Some(exp) = *expected {
                let ahead = pkt.tcp_seq.wrapping_sub(exp);
                if ahead > self.config.seq_window {
                    seq_anomaly = true;
                } else {
                    *expected = Some(pkt.tcp_seq.wrapping_add(segment_len(pkt)));
                }
            }
            if flags.fin() && !seq_anomaly {
                flow.phase = HandshakePhase::Closed;
            }
        } else if flags.fin() && flow.phase != HandshakePhase::None {
            flow.phase = HandshakePhase::Closed;
        }
        flow.last_activity_us = now;

        let to_server = match flow.initiator {
            Some(init) => init == from,
            None => pkt.dst_port < pkt.src_port,
        };
        // The FIN that closes the connection is still part of it.
        let established = flow.phase == HandshakePhase::Established
            || (before == HandshakePhase::Established && flags.fin() && !flags.rst());
        FlowVerdict { established, new_flow, seq_anomaly, to_server }
    }
}
