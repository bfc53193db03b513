use std::fmt::Write;

use super::parse::decode_content;
use super::*;

fn addr(e: &AddrExpr) -> String {
    match e {
        AddrExpr::Any => "any".into(),
        AddrExpr::Net(n) if n.prefix_len() == 32 => n.addr().to_string(),
        AddrExpr::Net(n) => n.to_string(),
        AddrExpr::Var(v) => format!("${v}"),
        AddrExpr::Not(inner) => format!("!{}", addr(inner)),
        AddrExpr::List(items) => format!("[{}]", items.iter().map(addr).collect::<Vec<_>>().join(",")),
    }
}

fn port(e: &PortExpr) -> String {
    match e {
        PortExpr::Any => "any".into(),
        PortExpr::Port(p) => p.to_string(),
        PortExpr::Range(lo, hi) => format!("{lo}:{hi}"),
        PortExpr::Not(inner) => format!("!{}", port(inner)),
        PortExpr::List(items) => format!("[{}]", items.iter().map(port).collect::<Vec<_>>().join(",")),
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Literal text when it reads back unchanged, hex pairs otherwise.
fn content_text(bytes: &[u8]) -> String {
    let literal_ok = bytes.iter().all(|b| (0x20..0x7f).contains(b) && !matches!(b, b'|' | b'"' | b'\\' | b';'));
    if literal_ok {
        let text = std::str::from_utf8(bytes).expect("printable ascii");
        if decode_content(text) == bytes {
            return text.to_string();
        }
    }
    let hex: Vec<String> = bytes.iter().map(|b| format!("{b:02X}")).collect();
    format!(" {} ", hex.join(" "))
}

fn option(o: &RuleOption, out: &mut Vec<String>) {
    match o {
        RuleOption::Content(c) => {
            out.push(format!("content:\"{}\"", content_text(&c.pattern)));
            if let Some(off) = c.offset {
                out.push(format!("offset:{off}"));
            }
            if let Some(d) = c.depth {
                out.push(format!("depth:{d}"));
            }
        }
        RuleOption::Msg(m) => out.push(format!("msg:\"{}\"", escape(m))),
        RuleOption::Sid(s) => out.push(format!("sid:{s}")),
        RuleOption::Gid(g) => out.push(format!("gid:{g}")),
        RuleOption::Flow(flags) => {
            out.push(format!("flow: {}", flags.iter().map(|f| f.as_str()).collect::<Vec<_>>().join(", ")))
        }
        RuleOption::Threshold(t) => {
            let kind = match t.kind {
                ThresholdType::Limit => "limit",
                ThresholdType::Threshold => "threshold",
                ThresholdType::Both => "both",
            };
            let track = match t.track {
                Track::BySrc => "by_src",
                Track::ByDst => "by_dst",
            };
            out.push(format!("threshold: type {kind}, track {track}, count {}, seconds {}", t.count, t.seconds));
        }
        RuleOption::Metadata(kv) => {
            out.push(format!("metadata: {}", kv.iter().map(|(k, v)| format!("{k} {v}")).collect::<Vec<_>>().join(", ")))
        }
    }
}

/// Canonical single-line text for a rule.
pub fn render_rule(rule: &Rule) -> String {
    let h = &rule.header;
    let action = match h.action {
        Action::Alert => "alert",
        Action::Drop => "drop",
        Action::Pass => "pass",
        Action::Log => "log",
    };
    let proto = match h.protocol {
        Protocol::Tcp => "tcp",
        Protocol::Udp => "udp",
        Protocol::Ip => "ip",
        Protocol::Icmp => "icmp",
    };
    let dir = match h.direction {
        RuleDirection::Forward => "->",
        RuleDirection::Both => "<>",
    };
    let mut parts = Vec::new();
    for o in &rule.options {
        option(o, &mut parts);
    }
    let mut s = String::new();
    write!(s, "{action} {proto} {} {} {dir} {} {} (", addr(&h.src), port(&h.src_port), addr(&h.dst), port(&h.dst_port))
        .expect("string write");
    for p in parts {
        s.push_str(&p);
        s.push_str("; ");
    }
    if s.ends_with(' ') {
        s.pop();
    }
    s.push(')');
    s
}
