//! Snort-style signature rules: grammar, rendering, compilation and
//! in-order evaluation.
//!
//! ```text
//! rule     = action proto addr port dir addr port "(" option *( ";" option ) [";"] ")"
//! action   = "alert" | "drop" | "pass" | "log"
//! proto    = "tcp" | "udp" | "ip" | "icmp"
//! dir      = "->" | "<>"
//! addr     = "any" | ipv4 | ipv4 "/" prefix | "$" NAME | "!" addr | "[" addr *( "," addr ) "]"
//! port     = "any" | num | num ":" num | "!" port | "[" port *( "," port ) "]"
//! option   = "content:" quoted | "offset:" num | "depth:" num | "msg:" quoted
//!          | "sid:" num | "gid:" num | "flow:" flag *( "," flag )
//!          | "threshold:" "type" ttype "," "track" track "," "count" num "," "seconds" num
//!          | "metadata:" key value *( "," key value )
//! flag     = "established" | "not_established" | "to_server" | "to_client"
//! ttype    = "limit" | "threshold" | "both"
//! track    = "by_src" | "by_dst"
//! ```
//!
//! A quoted content made only of whitespace-separated hex pairs (`" 05 64 "`)
//! is raw octets; `|05 64|` segments are also accepted. Anything else is
//! literal text.

mod compile;
mod eval;
mod parse;
mod render;

use std::net::Ipv4Addr;

use ipnet::Ipv4Net;

pub use compile::{compile_ruleset, CompileError, CompileErrors, CompiledRule, CompiledRuleSet, Variables};
pub use eval::{evaluate_packet, Evaluation, PacketContext, RuleMatch, ThresholdState};
pub use parse::{parse_rule, parse_rule_line, RuleError};
pub use render::render_rule;

/// gid used by protocol-aware detectors.
pub const PREPROC_GID: u32 = 145;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    #[default]
    Alert,
    Drop,
    Pass,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Protocol {
    Tcp,
    Udp,
    Ip,
    Icmp,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum AddrExpr {
    Any,
    Net(Ipv4Net),
    Var(String),
    Not(Box<AddrExpr>),
    List(Vec<AddrExpr>),
}

impl AddrExpr {
    /// Matches against a variable-free expression; variables never match.
    pub fn matches(&self, ip: Ipv4Addr) -> bool {
        match self {
            AddrExpr::Any => true,
            AddrExpr::Net(net) => net.contains(&ip),
            AddrExpr::Var(_) => false,
            AddrExpr::Not(inner) => !inner.matches(ip),
            AddrExpr::List(items) => items.iter().any(|e| e.matches(ip)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PortExpr {
    Any,
    Port(u16),
    Range(u16, u16),
    Not(Box<PortExpr>),
    List(Vec<PortExpr>),
}

impl PortExpr {
    pub fn matches(&self, port: u16) -> bool {
        match self {
            PortExpr::Any => true,
            PortExpr::Port(p) => *p == port,
            PortExpr::Range(lo, hi) => (*lo..=*hi).contains(&port),
            PortExpr::Not(inner) => !inner.matches(port),
            PortExpr::List(items) => items.iter().any(|e| e.matches(port)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleDirection {
    /// `->`
    Forward,
    /// `<>`
    Both,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RuleHeader {
    pub action: Action,
    pub protocol: Protocol,
    pub src: AddrExpr,
    pub src_port: PortExpr,
    pub direction: RuleDirection,
    pub dst: AddrExpr,
    pub dst_port: PortExpr,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Content {
    pub pattern: Vec<u8>,
    pub offset: Option<u32>,
    pub depth: Option<u32>,
}

impl Content {
    pub fn new(pattern: impl Into<Vec<u8>>) -> Self {
        Self { pattern: pattern.into(), offset: None, depth: None }
    }

    pub fn at(pattern: impl Into<Vec<u8>>, offset: u32) -> Self {
        let pattern = pattern.into();
        let depth = pattern.len() as u32;
        Self { pattern, offset: Some(offset), depth: Some(depth) }
    }

    /// Searches `payload[offset .. offset + depth)` for the pattern.
    pub fn matches(&self, payload: &[u8]) -> bool {
        let start = self.offset.unwrap_or(0) as usize;
        if start > payload.len() {
            return false;
        }
        let end = match self.depth {
            Some(d) => (start + d as usize).min(payload.len()),
            None => payload.len(),
        };
        let window = &payload[start..end];
        if self.pattern.is_empty() {
            return true;
        }
        window.windows(self.pattern.len()).any(|w| w == self.pattern.as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FlowFlag {
    Established,
    NotEstablished,
    ToServer,
    ToClient,
}

impl FlowFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            FlowFlag::Established => "established",
            FlowFlag::NotEstablished => "not_established",
            FlowFlag::ToServer => "to_server",
            FlowFlag::ToClient => "to_client",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ThresholdType {
    Limit,
    Threshold,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Track {
    BySrc,
    ByDst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Threshold {
    pub kind: ThresholdType,
    pub track: Track,
    pub count: u32,
    pub seconds: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum RuleOption {
    Content(Content),
    Msg(String),
    Sid(u32),
    Gid(u32),
    Flow(Vec<FlowFlag>),
    Threshold(Threshold),
    Metadata(Vec<(String, String)>),
}

#[derive(Debug, Clone)]
pub struct Rule {
    pub header: RuleHeader,
    pub options: Vec<RuleOption>,
    pub raw_text: String,
    /// Index in the compiled set; 0 for a rule parsed on its own.
    pub position: usize,
}

impl Rule {
    pub fn sid(&self) -> u32 {
        self.options
            .iter()
            .find_map(|o| match o {
                RuleOption::Sid(s) => Some(*s),
                _ => None,
            })
            .unwrap_or(0)
    }

    pub fn gid(&self) -> u32 {
        self.options
            .iter()
            .find_map(|o| match o {
                RuleOption::Gid(g) => Some(*g),
                _ => None,
            })
            .unwrap_or(1)
    }

    pub fn msg(&self) -> Option<&str> {
        self.options.iter().find_map(|o| match o {
            RuleOption::Msg(m) => Some(m.as_str()),
            _ => None,
        })
    }

    /// Alert text, falling back to `sid:N` for msg-less rules.
    pub fn alert_msg(&self) -> String {
        self.msg().map(str::to_string).unwrap_or_else(|| format!("sid:{}", self.sid()))
    }

    pub fn threshold(&self) -> Option<&Threshold> {
        self.options.iter().find_map(|o| match o {
            RuleOption::Threshold(t) => Some(t),
            _ => None,
        })
    }

    pub fn contents(&self) -> impl Iterator<Item = &Content> {
        self.options.iter().filter_map(|o| match o {
            RuleOption::Content(c) => Some(c),
            _ => None,
        })
    }

    pub fn metadata(&self) -> impl Iterator<Item = (&str, &str)> {
        self.options
            .iter()
            .filter_map(|o| match o {
                RuleOption::Metadata(kv) => Some(kv),
                _ => None,
            })
            .flatten()
            .map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn is_preproc(&self) -> bool {
        self.metadata().any(|(k, v)| k == "rule-type" && v == "preproc")
    }

    /// Header and options equal; raw text and position ignored.
    pub fn semantic_eq(&self, other: &Rule) -> bool {
        self.header == other.header && self.options == other.options
    }

    /// Header and options equal, ignoring msg and sid.
    pub fn same_signature(&self, other: &Rule) -> bool {
        let strip = |r: &Rule| -> Vec<RuleOption> {
            r.options.iter().filter(|o| !matches!(o, RuleOption::Msg(_) | RuleOption::Sid(_))).cloned().collect()
        };
        self.header == other.header && strip(self) == strip(other)
    }
}

impl std::fmt::Display for Rule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&render_rule(self))
    }
}

#[cfg(test)]
mod tests;
