use std::collections::HashMap;

use super::*;
use crate::flow::FlowVerdict;
use crate::packet::{IpProto, ParsedPacket};

/// Everything a rule can look at for one packet.
#[derive(Debug, Clone, Copy)]
pub struct PacketContext<'a> {
    pub pkt: &'a ParsedPacket,
    /// `None` for non-TCP packets.
    pub verdict: Option<&'a FlowVerdict>,
    /// `(gid, sid)` of every detector check that fired on this packet.
    pub fired: &'a [(u32, u32)],
    /// Clock for threshold windows, in microseconds.
    pub now_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Window {
    start_us: u64,
    end_us: u64,
    count: u32,
}

/// Per-pipeline threshold counters keyed by `(gid, sid, tracked address)`.
#[derive(Debug, Default, Clone)]
pub struct ThresholdState {
    windows: HashMap<(u32, u32, Ipv4Addr), Window>,
}

const PURGE_AT: usize = 1 << 16;

impl ThresholdState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Counts one event and reports whether it should alert.
    pub fn record(&mut self, gid: u32, sid: u32, key: Ipv4Addr, t: &Threshold, now_us: u64) -> bool {
        if self.windows.len() >= PURGE_AT {
            self.windows.retain(|_, w| now_us < w.end_us);
        }
        let span = t.seconds as u64 * 1_000_000;
        let w =
            self.windows.entry((gid, sid, key)).or_insert(Window { start_us: now_us, end_us: now_us + span, count: 0 });
        if now_us >= w.end_us {
            *w = Window { start_us: now_us, end_us: now_us + span, count: 0 };
        }
        w.count = w.count.saturating_add(1);
        match t.kind {
            ThresholdType::Both => w.count == t.count,
            ThresholdType::Limit => w.count <= t.count,
            ThresholdType::Threshold => w.count.is_multiple_of(t.count),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuleMatch {
    pub position: usize,
    pub action: Action,
    /// Option checks performed for this packet up to and including this rule.
    pub options_evaluated: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Evaluation {
    pub matches: Vec<RuleMatch>,
    /// Header and option checks across every rule examined.
    pub options_evaluated: u64,
    /// A pass rule matched; no alert may be raised for this packet.
    pub suppressed: bool,
}

impl Evaluation {
    pub fn first(&self) -> Option<&RuleMatch> {
        self.matches.first()
    }

    pub fn drops(&self) -> bool {
        self.matches.iter().any(|m| m.action == Action::Drop)
    }
}

fn proto_matches(p: Protocol, pkt: &ParsedPacket) -> bool {
    match p {
        Protocol::Ip => true,
        Protocol::Tcp => pkt.proto == IpProto::Tcp,
        Protocol::Udp => pkt.proto == IpProto::Udp,
        Protocol::Icmp => pkt.proto == IpProto::Icmp,
    }
}

fn header_matches(r: &CompiledRule, pkt: &ParsedPacket) -> bool {
    let h = &r.rule.header;
    if !proto_matches(h.protocol, pkt) {
        return false;
    }
    let forward = r.src.matches(pkt.src_ip)
        && h.src_port.matches(pkt.src_port)
        && r.dst.matches(pkt.dst_ip)
        && h.dst_port.matches(pkt.dst_port);
    forward
        || (h.direction == RuleDirection::Both
            && r.src.matches(pkt.dst_ip)
            && h.src_port.matches(pkt.dst_port)
            && r.dst.matches(pkt.src_ip)
            && h.dst_port.matches(pkt.src_port))
}

fn flow_holds(flags: &[FlowFlag], verdict: Option<&FlowVerdict>) -> bool {
    let Some(v) = verdict else {
        return false;
    };
    flags.iter().all(|f| match f {
        FlowFlag::Established => v.established,
        FlowFlag::NotEstablished => !v.established,
        FlowFlag::ToServer => v.to_server,
        FlowFlag::ToClient => !v.to_server,
    })
}

/// Evaluates every option of a header-matched rule. Returns whether the rule
/// fires and how many option checks it cost. The threshold is an event
/// filter applied after detection and costs nothing.
fn options_match(r: &CompiledRule, ctx: &PacketContext<'_>, state: &mut ThresholdState) -> (bool, u64) {
    let rule = &r.rule;
    // udp/icmp rules match on their header alone.
    if matches!(rule.header.protocol, Protocol::Udp | Protocol::Icmp) {
        return (true, 0);
    }
    let mut checks = 0u64;
    let mut ok = true;
    if rule.is_preproc() {
        checks += 1;
        ok &= ctx.fired.contains(&(rule.gid(), rule.sid()));
    }
    // Every predicate is checked; the cost of a rule grows with its options.
    for o in &rule.options {
        let hit = match o {
            RuleOption::Content(c) => c.matches(&ctx.pkt.payload),
            RuleOption::Flow(flags) => flow_holds(flags, ctx.verdict),
            _ => continue,
        };
        checks += 1;
        ok &= hit;
    }
    if ok {
        if let Some(t) = rule.threshold() {
            let key = match t.track {
                Track::BySrc => ctx.pkt.src_ip,
                Track::ByDst => ctx.pkt.dst_ip,
            };
            ok = state.record(rule.gid(), rule.sid(), key, t, ctx.now_us);
        }
    }
    (ok, checks)
}

/// Tests rules strictly in position order. Stops at the first match unless
/// `evaluate_all` is set; a matching pass rule always stops and suppresses.
pub fn evaluate_packet(
    ruleset: &CompiledRuleSet,
    ctx: &PacketContext<'_>,
    state: &mut ThresholdState,
    evaluate_all: bool,
) -> Evaluation {
    let mut eval = Evaluation::default();
    for r in &ruleset.rules {
        // The header comparison is one check for every rule examined.
        eval.options_evaluated += 1;
        if !header_matches(r, ctx.pkt) {
            continue;
        }
        let (hit, cost) = options_match(r, ctx, state);
        eval.options_evaluated += cost;
        if !hit {
            continue;
        }
        let action = r.rule.header.action;
        if action == Action::Pass {
            eval.matches.clear();
            eval.suppressed = true;
            break;
        }
        eval.matches.push(RuleMatch { position: r.rule.position, action, options_evaluated: eval.options_evaluated });
        if !evaluate_all {
            break;
        }
    }
    eval
}
