//! Baseline learning and rule generation for four traffic-pattern kinds:
//! 1 unseen endpoint/port/function, 2 wrong flow direction, 3 critical
//! command, 4 rate above baseline.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detectors::{AddressSet, DetectorConfig};
use crate::dnp3::{FunctionSet, FUNCTION_CODE_OFFSET};
use crate::packet::{decode_packet, DecodeOptions, ParsedPacket};
use crate::pcap::CaptureRecord;
use crate::rules::{parse_rule, parse_rule_line, render_rule, Rule, RuleError, Variables};

/// First sid handed out to generated rules.
pub const GENERATED_SID_BASE: u32 = 1_000_000;

#[derive(Debug, Error)]
pub enum RulegenError {
    #[error("capture holds no DNP3 traffic")]
    NoDnp3Traffic,
    #[error("repository line {line}: {error}")]
    Repository { line: usize, error: RuleError },
}

/// (master address, outstation link address, function code).
pub type TupleKey = (Ipv4Addr, u16, u8);

#[derive(Debug, Clone, PartialEq)]
pub struct TimingStats {
    pub count: u64,
    /// Mean gap between consecutive frames, in seconds; 0 for one frame.
    pub mean_interval_s: f64,
    /// Population standard deviation of the gaps; 0 below three frames.
    pub std_interval_s: f64,
    /// Most frames seen in any window of `window_s` seconds.
    pub max_burst: u32,
}

impl TimingStats {
    fn from_times(times: &[u64], window_us: u64) -> Self {
        let gaps: Vec<f64> = times.windows(2).map(|w| (w[1] - w[0]) as f64 / 1e6).collect();
        let (mean, std) = if gaps.is_empty() {
            (0.0, 0.0)
        } else {
            let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
            let var = gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / gaps.len() as f64;
            (mean, var.sqrt())
        };
        Self {
            count: times.len() as u64,
            mean_interval_s: mean,
            std_interval_s: std,
            max_burst: max_burst(times, window_us),
        }
    }

    /// Events per window above which traffic counts as a rate anomaly.
    pub fn rate_bound(&self, window_s: u32, k_sigma: f64) -> u32 {
        let burst = self.max_burst + 1;
        let floor = self.mean_interval_s - k_sigma * self.std_interval_s;
        if self.count >= 2 && floor > 0.0 {
            burst.max((window_s as f64 / floor).ceil() as u32)
        } else {
            burst
        }
    }
}

/// Largest number of sorted timestamps inside any half-open window.
pub fn max_burst(times: &[u64], window_us: u64) -> u32 {
    let mut best = 0;
    let mut lo = 0;
    for hi in 0..times.len() {
        while times[hi] - times[lo] >= window_us {
            lo += 1;
        }
        best = best.max(hi - lo + 1);
    }
    best as u32
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineProfile {
    /// Function codes seen per (master, outstation link address).
    pub function_matrix: BTreeMap<(Ipv4Addr, u16), BTreeMap<u8, u64>>,
    pub timing_stats: BTreeMap<TupleKey, TimingStats>,
    /// Per request source, timing of every DNP3 request packet it sent.
    pub source_stats: BTreeMap<Ipv4Addr, TimingStats>,
    pub masters: BTreeSet<Ipv4Addr>,
    pub outstations: BTreeSet<Ipv4Addr>,
    /// Server-side TCP ports of DNP3 sessions.
    pub ports: BTreeSet<u16>,
    pub window_s: u32,
    /// sha256 over the capture's records.
    pub capture_id: String,
    pub last_ts_us: u64,
}

impl BaselineProfile {
    pub fn endpoints(&self) -> BTreeSet<Ipv4Addr> {
        self.masters.union(&self.outstations).copied().collect()
    }

    /// `$MASTERS` and `$OUTSTATIONS` bound to the learned hosts.
    pub fn variables(&self) -> Variables {
        let hosts = |s: &BTreeSet<Ipv4Addr>| s.iter().map(|ip| Ipv4Net::new(*ip, 32).expect("prefix 32")).collect();
        Variables::new().with("MASTERS", hosts(&self.masters)).with("OUTSTATIONS", hosts(&self.outstations))
    }

    /// Detector settings that trust exactly the learned masters.
    pub fn detector_config(&self, cfg: &RulegenConfig) -> DetectorConfig {
        DetectorConfig {
            authorized_masters: AddressSet::hosts(&self.masters.iter().copied().collect::<Vec<_>>()),
            select_timeout_us: cfg.select_timeout_s as u64 * 1_000_000,
            critical: cfg.critical.clone(),
            ..DetectorConfig::default()
        }
    }
}

fn capture_digest(records: &[CaptureRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.ts_us.to_le_bytes());
        h.update((r.data.len() as u64).to_le_bytes());
        h.update(&r.data);
    }
    hex::encode(h.finalize())
}

/// Aggregates every DNP3 request and response in the capture.
pub fn learn_baseline(records: &[CaptureRecord], window_s: u32) -> Result<BaselineProfile, RulegenError> {
    let opts = DecodeOptions::default();
    let mut matrix: BTreeMap<(Ipv4Addr, u16), BTreeMap<u8, u64>> = BTreeMap::new();
    let mut times: BTreeMap<TupleKey, Vec<u64>> = BTreeMap::new();
    let mut source_times: BTreeMap<Ipv4Addr, Vec<u64>> = BTreeMap::new();
    let mut masters = BTreeSet::new();
    let mut outstations = BTreeSet::new();
    let mut ports = BTreeSet::new();
    let mut last_ts_us = 0;
    for r in records {
        last_ts_us = last_ts_us.max(r.ts_us);
        let Ok(pkt) = decode_packet(r, &opts) else { continue };
        let mut any_request = false;
        for f in &pkt.dnp3 {
            let Some(code) = f.function_code() else { continue };
            let key = if f.is_request() {
                any_request = true;
                masters.insert(pkt.src_ip);
                outstations.insert(pkt.dst_ip);
                ports.insert(pkt.dst_port);
                (pkt.src_ip, f.link.destination, code)
            } else {
                masters.insert(pkt.dst_ip);
                outstations.insert(pkt.src_ip);
                ports.insert(pkt.src_port);
                (pkt.dst_ip, f.link.source, code)
            };
            *matrix.entry((key.0, key.1)).or_default().entry(code).or_default() += 1;
            times.entry(key).or_default().push(pkt.ts_us);
        }
        if any_request {
            source_times.entry(pkt.src_ip).or_default().push(pkt.ts_us);
        }
    }
    if matrix.is_empty() {
        return Err(RulegenError::NoDnp3Traffic);
    }
    let window_us = window_s as u64 * 1_000_000;
    Ok(BaselineProfile {
        function_matrix: matrix,
        timing_stats: times.iter().map(|(k, t)| (*k, TimingStats::from_times(t, window_us))).collect(),
        source_stats: source_times.iter().map(|(k, t)| (*k, TimingStats::from_times(t, window_us))).collect(),
        masters,
        outstations,
        ports,
        window_s,
        capture_id: capture_digest(records),
        last_ts_us,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PatternKind {
    PayloadPort = 1,
    FlowDirection = 2,
    CriticalCommand = 3,
    RateThreshold = 4,
}

impl PatternKind {
    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(Self::PayloadPort),
            2 => Some(Self::FlowDirection),
            3 => Some(Self::CriticalCommand),
            4 => Some(Self::RateThreshold),
            _ => None,
        }
    }

    /// Position in the repository; smaller sorts first.
    pub fn priority(self) -> u8 {
        match self {
            Self::CriticalCommand => 0,
            Self::FlowDirection => 1,
            Self::PayloadPort => 2,
            Self::RateThreshold => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficPattern {
    pub kind: PatternKind,
    pub src: Option<Ipv4Addr>,
    pub dst: Option<Ipv4Addr>,
    pub port: Option<u16>,
    pub outstation_addr: Option<u16>,
    pub function_code: Option<u8>,
    /// Observed or bounding counts backing the pattern.
    pub evidence: String,
}

impl TrafficPattern {
    fn new(kind: PatternKind) -> Self {
        Self {
            kind,
            src: None,
            dst: None,
            port: None,
            outstation_addr: None,
            function_code: None,
            evidence: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Classification {
    Known,
    Pattern(TrafficPattern),
}

#[derive(Debug, Clone)]
pub struct RulegenConfig {
    pub k_sigma: f64,
    pub window_s: u32,
    pub select_timeout_s: u32,
    pub critical: FunctionSet,
}

impl Default for RulegenConfig {
    fn default() -> Self {
        Self { k_sigma: 3.0, window_s: 10, select_timeout_s: 10, critical: FunctionSet::default() }
    }
}

/// Labels packets against a profile; keeps per-tuple arrival windows for
/// the rate check.
pub struct Classifier<'a> {
    profile: &'a BaselineProfile,
    config: RulegenConfig,
    recent: HashMap<TupleKey, VecDeque<u64>>,
}

impl<'a> Classifier<'a> {
    pub fn new(profile: &'a BaselineProfile, config: RulegenConfig) -> Self {
        Self { profile, config, recent: HashMap::new() }
    }

    pub fn classify(&mut self, pkt: &ParsedPacket) -> Classification {
        let p = self.profile;
        let endpoints = p.endpoints();
        let pattern = |kind| {
            let mut t = TrafficPattern::new(kind);
            t.src = Some(pkt.src_ip);
            t.dst = Some(pkt.dst_ip);
            t
        };
        let server_port = if p.outstations.contains(&pkt.dst_ip) {
            Some(pkt.dst_port)
        } else if p.outstations.contains(&pkt.src_ip) {
            Some(pkt.src_port)
        } else {
            None
        };
        let unseen_port = server_port.is_some_and(|port| !p.ports.contains(&port));
        if !endpoints.contains(&pkt.src_ip) || !endpoints.contains(&pkt.dst_ip) || unseen_port {
            let mut t = pattern(PatternKind::PayloadPort);
            t.port = Some(pkt.dst_port);
            t.function_code = pkt.dnp3_function();
            t.evidence = "endpoint or port absent from baseline".into();
            return Classification::Pattern(t);
        }
        for f in &pkt.dnp3 {
            let Some(code) = f.function_code() else { continue };
            // Keyed by role so a reversed message still finds its pair.
            let master = if p.masters.contains(&pkt.src_ip) { pkt.src_ip } else { pkt.dst_ip };
            let addr = if f.is_request() { f.link.destination } else { f.link.source };
            let mut t = pattern(PatternKind::PayloadPort);
            t.outstation_addr = Some(addr);
            t.function_code = Some(code);
            let seen = p.function_matrix.get(&(master, addr)).is_some_and(|m| m.contains_key(&code));
            if !seen {
                t.evidence = format!("function 0x{code:02X} never seen for this pair");
                return Classification::Pattern(t);
            }
            let wrong_way = if f.is_request() {
                !p.masters.contains(&pkt.src_ip) || !p.outstations.contains(&pkt.dst_ip)
            } else {
                !p.outstations.contains(&pkt.src_ip) || !p.masters.contains(&pkt.dst_ip)
            };
            if wrong_way {
                t.kind = PatternKind::FlowDirection;
                t.evidence = "message direction opposite to baseline roles".into();
                return Classification::Pattern(t);
            }
            if f.is_request() && self.config.critical.contains(code) {
                t.kind = PatternKind::CriticalCommand;
                t.evidence = "critical function".into();
                return Classification::Pattern(t);
            }
            let key = (master, addr, code);
            let window_us = self.config.window_s as u64 * 1_000_000;
            let q = self.recent.entry(key).or_default();
            while q.front().is_some_and(|&ts| pkt.ts_us.saturating_sub(ts) >= window_us) {
                q.pop_front();
            }
            q.push_back(pkt.ts_us);
            let bound = p.timing_stats[&key].rate_bound(self.config.window_s, self.config.k_sigma);
            if q.len() as u32 >= bound {
                t.kind = PatternKind::RateThreshold;
                t.evidence = format!("{} frames in {} s, bound {bound}", q.len(), self.config.window_s);
                return Classification::Pattern(t);
            }
        }
        Classification::Known
    }
}

/// Stateless check of one packet, rate history empty.
pub fn classify_observation(profile: &BaselineProfile, config: &RulegenConfig, pkt: &ParsedPacket) -> Classification {
    Classifier::new(profile, config.clone()).classify(pkt)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub capture_id: String,
    pub generated_at_us: u64,
}

#[derive(Debug, Clone)]
pub struct GeneratedRule {
    pub rule: Rule,
    pub pattern: TrafficPattern,
    pub provenance: Provenance,
}

impl fmt::Display for GeneratedRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_rule(&self.rule))
    }
}

fn port_expr(ports: &BTreeSet<u16>, negate: bool) -> String {
    let list: Vec<String> = ports.iter().map(u16::to_string).collect();
    let body = match list.len() {
        0 => return "any".into(),
        1 => list[0].clone(),
        _ => format!("[{}]", list.join(",")),
    };
    if negate {
        format!("!{body}")
    } else {
        body
    }
}

fn hex_octets(bytes: &[u8]) -> String {
    let pairs: Vec<String> = bytes.iter().map(|b| format!("{b:02X}")).collect();
    format!(" {} ", pairs.join(" "))
}

/// Emits rules in priority order: kind 3, 2, 1, then 4.
pub fn generate_ruleset(profile: &BaselineProfile, cfg: &RulegenConfig) -> Vec<GeneratedRule> {
    let provenance = Provenance { capture_id: profile.capture_id.clone(), generated_at_us: profile.last_ts_us };
    let port = port_expr(&profile.ports, false);
    let not_port = port_expr(&profile.ports, true);
    let w = cfg.window_s;
    let mut out = Vec::new();
    let mut counters = [0u32; 5];
    let mut emit = |kind: PatternKind, body: String, mut pattern: TrafficPattern| {
        let n = kind.number() as usize;
        let sid = GENERATED_SID_BASE + n as u32 * 100_000 + counters[n];
        counters[n] += 1;
        let text = format!("{body} sid:{sid}; metadata: pattern-kind {n};)");
        pattern.kind = kind;
        out.push(GeneratedRule {
            rule: parse_rule(&text).expect("generated rule text parses"),
            pattern,
            provenance: provenance.clone(),
        });
    };

    for code in cfg.critical.codes() {
        let mut p = TrafficPattern::new(PatternKind::CriticalCommand);
        p.function_code = Some(code);
        p.evidence = "critical function from outside the master set".into();
        emit(
            PatternKind::CriticalCommand,
            format!(
                "alert tcp !$MASTERS any -> $OUTSTATIONS {port} (content:\"{}\"; offset:{FUNCTION_CODE_OFFSET}; depth:1; msg:\"DNP3 {} from unknown source\";",
                hex_octets(&[code]),
                crate::dnp3::describe_function(code)
            ),
            p,
        );
    }

    let mut p = TrafficPattern::new(PatternKind::FlowDirection);
    p.evidence = "session toward outstation without handshake".into();
    emit(
        PatternKind::FlowDirection,
        format!("alert tcp !$MASTERS any -> $OUTSTATIONS {port} (flow: not_established, to_server; msg:\"DNP3 session not established\";"),
        p,
    );
    if profile.masters.is_disjoint(&profile.outstations) {
        let mut p = TrafficPattern::new(PatternKind::FlowDirection);
        p.evidence = "outstation acting as master".into();
        emit(
            PatternKind::FlowDirection,
            format!("alert tcp $OUTSTATIONS any -> any {port} (content:\" 05 64 \"; offset:0; depth:2; msg:\"DNP3 request from outstation side\";"),
            p,
        );
    }

    let mut p = TrafficPattern::new(PatternKind::PayloadPort);
    p.evidence = "source outside learned endpoints".into();
    emit(
        PatternKind::PayloadPort,
        format!("alert tcp ![$MASTERS,$OUTSTATIONS] any -> $OUTSTATIONS {port} (msg:\"DNP3 port contacted by unknown endpoint\";"),
        p,
    );
    if !profile.ports.is_empty() {
        let mut p = TrafficPattern::new(PatternKind::PayloadPort);
        p.evidence = "outstation port outside baseline".into();
        emit(
            PatternKind::PayloadPort,
            format!("alert tcp any any -> $OUTSTATIONS {not_port} (msg:\"Unexpected outstation port\";"),
            p,
        );
    }

    for (&(master, addr, code), stats) in &profile.timing_stats {
        let bound = stats.rate_bound(w, cfg.k_sigma);
        let request = !crate::dnp3::is_response_code(code);
        let (header, addr_offset, track) = if request {
            (format!("alert tcp {master} any -> $OUTSTATIONS {port}"), 4, "by_src")
        } else {
            (format!("alert tcp $OUTSTATIONS {port} -> {master} any"), 6, "by_dst")
        };
        let mut p = TrafficPattern::new(PatternKind::RateThreshold);
        p.src = Some(master);
        p.outstation_addr = Some(addr);
        p.function_code = Some(code);
        p.evidence = format!(
            "count {} mean {:.6} s std {:.6} s max burst {} per {w} s",
            stats.count, stats.mean_interval_s, stats.std_interval_s, stats.max_burst
        );
        emit(
            PatternKind::RateThreshold,
            format!(
                "{header} (content:\" 05 64 \"; offset:0; depth:2; content:\"{}\"; offset:{addr_offset}; depth:2; content:\"{}\"; offset:{FUNCTION_CODE_OFFSET}; depth:1; threshold: type both, track {track}, count {bound}, seconds {w}; msg:\"DNP3 rate above baseline {master} addr {addr} fc 0x{code:02X}\";",
                hex_octets(&addr.to_le_bytes()),
                hex_octets(&[code])
            ),
            p,
        );
    }
    let global = profile.source_stats.values().map(|s| s.rate_bound(w, cfg.k_sigma)).max().unwrap_or(1);
    let mut p = TrafficPattern::new(PatternKind::RateThreshold);
    p.evidence = format!("busiest source bound {global} per {w} s");
    emit(
        PatternKind::RateThreshold,
        format!("alert tcp any any -> $OUTSTATIONS {port} (content:\" 05 64 \"; offset:0; depth:2; threshold: type both, track by_src, count {global}, seconds {w}; msg:\"DNP3 flood toward outstation\";"),
        p,
    );
    out
}

/// One rule per line.
pub fn render_generated(rules: &[GeneratedRule]) -> String {
    rules.iter().map(|r| render_rule(&r.rule) + "\n").collect()
}

/// Pattern kind from `metadata: pattern-kind N`, else guessed from options.
pub fn rule_kind(rule: &Rule) -> PatternKind {
    let tagged = rule
        .metadata()
        .find(|(k, _)| *k == "pattern-kind")
        .and_then(|(_, v)| v.parse().ok())
        .and_then(PatternKind::from_number);
    if let Some(k) = tagged {
        return k;
    }
    if rule.threshold().is_some() {
        PatternKind::RateThreshold
    } else if rule.is_preproc() || rule.contents().any(|c| c.offset == Some(FUNCTION_CODE_OFFSET as u32)) {
        PatternKind::CriticalCommand
    } else if rule.options.iter().any(|o| matches!(o, crate::rules::RuleOption::Flow(_))) {
        PatternKind::FlowDirection
    } else {
        PatternKind::PayloadPort
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeResult {
    pub text: String,
    /// `ADD|SKIP <sid> <reason>`, one per merged rule.
    pub changelog: Vec<String>,
}

enum Line {
    Rule(Rule),
    Other(String),
}

/// Adds rules to a repository by priority class, skipping signatures it
/// already holds and renumbering colliding sids.
pub fn merge_repository(repo: &str, new: &[GeneratedRule]) -> Result<MergeResult, RulegenError> {
    let mut lines = Vec::new();
    for (i, l) in repo.lines().enumerate() {
        match parse_rule_line(l) {
            Ok(Some(r)) => lines.push(Line::Rule(r)),
            Ok(None) => lines.push(Line::Other(l.to_string())),
            Err(error) => return Err(RulegenError::Repository { line: i + 1, error }),
        }
    }
    let mut changelog = Vec::new();
    for g in new {
        let existing = lines.iter().find_map(|l| match l {
            Line::Rule(r) if r.same_signature(&g.rule) => Some(r.sid()),
            _ => None,
        });
        if let Some(sid) = existing {
            changelog.push(format!("SKIP {} duplicate of sid {sid}", g.rule.sid()));
            continue;
        }
        let mut rule = g.rule.clone();
        let taken = |sid: u32, lines: &[Line]| {
            lines.iter().any(|l| matches!(l, Line::Rule(r) if r.gid() == rule.gid() && r.sid() == sid))
        };
        let original = rule.sid();
        let mut sid = original;
        while taken(sid, &lines) {
            sid += 1;
        }
        let mut reason = format!("pattern-kind {}", rule_kind(&rule).number());
        if sid != original {
            for o in rule.options.iter_mut() {
                if let crate::rules::RuleOption::Sid(s) = o {
                    *s = sid;
                }
            }
            reason.push_str(&format!(" renumbered from {original}"));
        }
        let rank = rule_kind(&rule).priority();
        let at = lines
            .iter()
            .position(|l| matches!(l, Line::Rule(r) if rule_kind(r).priority() > rank))
            .unwrap_or(lines.len());
        changelog.push(format!("ADD {sid} {reason}"));
        lines.insert(at, Line::Rule(rule));
    }
    let text = lines
        .iter()
        .map(|l| match l {
            Line::Rule(r) => render_rule(r) + "\n",
            Line::Other(s) => format!("{s}\n"),
        })
        .collect();
    Ok(MergeResult { text, changelog })
}
