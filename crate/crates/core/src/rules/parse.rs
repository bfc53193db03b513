use ipnet::Ipv4Net;
use thiserror::Error;

use super::*;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuleError {
    /// `position` is a character offset into the rule text.
    #[error("syntax error at column {position}: {reason}")]
    SyntaxError { position: usize, reason: String },
    #[error("unknown rule option `{0}`")]
    UnknownOption(String),
    #[error("rule has no sid")]
    MissingSid,
}

fn syntax(position: usize, reason: impl Into<String>) -> RuleError {
    RuleError::SyntaxError { position, reason: reason.into() }
}

/// Parses one line of a rule file. Blank lines and `#` comments yield `None`.
pub fn parse_rule_line(line: &str) -> Result<Option<Rule>, RuleError> {
    let trimmed = line.trim();
    if trimmed.is_empty() || trimmed.starts_with('#') {
        return Ok(None);
    }
    parse_rule(line).map(Some)
}

/// Parses a single rule.
pub fn parse_rule(text: &str) -> Result<Rule, RuleError> {
    let lead = text.len() - text.trim_start().len();
    let body = text.trim();
    let open = body.find('(').ok_or_else(|| syntax(lead + body.len(), "expected `(` starting the option list"))?;
    if !body.ends_with(')') {
        return Err(syntax(lead + body.len(), "expected `)` closing the option list"));
    }
    let header = parse_header(&body[..open], lead)?;
    let options = parse_options(&body[open + 1..body.len() - 1], lead + open + 1)?;
    let rule = Rule { header, options, raw_text: body.to_string(), position: 0 };
    validate(&rule, lead)?;
    Ok(rule)
}

fn validate(rule: &Rule, at: usize) -> Result<(), RuleError> {
    let count = |f: fn(&RuleOption) -> bool| rule.options.iter().filter(|o| f(o)).count();
    if count(|o| matches!(o, RuleOption::Sid(_))) == 0 {
        return Err(RuleError::MissingSid);
    }
    if count(|o| matches!(o, RuleOption::Sid(_))) > 1 {
        return Err(syntax(at, "sid given more than once"));
    }
    if count(|o| matches!(o, RuleOption::Gid(_))) > 1 {
        return Err(syntax(at, "gid given more than once"));
    }
    if count(|o| matches!(o, RuleOption::Threshold(_))) > 1 {
        return Err(syntax(at, "a rule takes at most one threshold"));
    }
    if rule.is_preproc() {
        if rule.gid() == 1 {
            return Err(syntax(at, "preproc rules need a non-default gid"));
        }
        if rule.contents().next().is_some() {
            return Err(syntax(at, "preproc rules cannot carry content"));
        }
    }
    if rule.contents().any(|c| c.pattern.is_empty()) {
        return Err(syntax(at, "content must contain at least one octet"));
    }
    Ok(())
}

/// Splits on whitespace, keeping `[...]` groups together.
fn header_tokens(text: &str, base: usize) -> Result<Vec<(usize, &str)>, RuleError> {
    let mut tokens = Vec::new();
    let mut depth = 0i32;
    let mut start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        match ch {
            '[' => depth += 1,
            ']' => {
                depth -= 1;
                if depth < 0 {
                    return Err(syntax(base + i, "unbalanced `]`"));
                }
            }
            _ => {}
        }
        if ch.is_whitespace() && depth == 0 {
            if let Some(s) = start.take() {
                tokens.push((base + s, &text[s..i]));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if depth != 0 {
        return Err(syntax(base + text.len(), "unbalanced `[`"));
    }
    if let Some(s) = start {
        tokens.push((base + s, &text[s..]));
    }
    Ok(tokens)
}

fn parse_header(text: &str, base: usize) -> Result<RuleHeader, RuleError> {
    let tokens = header_tokens(text, base)?;
    if tokens.len() != 7 {
        return Err(syntax(base, format!("rule header needs 7 fields, found {}", tokens.len())));
    }
    let (pos, tok) = tokens[0];
    let action = match tok {
        "alert" => Action::Alert,
        "drop" => Action::Drop,
        "pass" => Action::Pass,
        "log" => Action::Log,
        _ => return Err(syntax(pos, format!("unknown action `{tok}`"))),
    };
    let (pos, tok) = tokens[1];
    let protocol = match tok {
        "tcp" => Protocol::Tcp,
        "udp" => Protocol::Udp,
        "ip" => Protocol::Ip,
        "icmp" => Protocol::Icmp,
        _ => return Err(syntax(pos, format!("unknown protocol `{tok}`"))),
    };
    let (pos, tok) = tokens[4];
    let direction = match tok {
        "->" => RuleDirection::Forward,
        "<>" => RuleDirection::Both,
        _ => return Err(syntax(pos, format!("expected `->` or `<>`, found `{tok}`"))),
    };
    Ok(RuleHeader {
        action,
        protocol,
        src: parse_addr(tokens[2].1, tokens[2].0)?,
        src_port: parse_port(tokens[3].1, tokens[3].0)?,
        direction,
        dst: parse_addr(tokens[5].1, tokens[5].0)?,
        dst_port: parse_port(tokens[6].1, tokens[6].0)?,
    })
}

/// Splits a bracket list body on top-level commas.
fn split_list(text: &str) -> Vec<(usize, &str)> {
    let mut parts = Vec::new();
    let mut depth = 0;
    let mut start = 0;
    for (i, ch) in text.char_indices() {
        match ch {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                parts.push((start, &text[start..i]));
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push((start, &text[start..]));
    parts
}

fn parse_addr(tok: &str, pos: usize) -> Result<AddrExpr, RuleError> {
    let lead = tok.len() - tok.trim_start().len();
    let tok = tok.trim();
    let pos = pos + lead;
    if tok.is_empty() {
        return Err(syntax(pos, "empty address"));
    }
    if let Some(rest) = tok.strip_prefix('!') {
        return Ok(AddrExpr::Not(Box::new(parse_addr(rest, pos + 1)?)));
    }
    if let Some(inner) = tok.strip_prefix('[') {
        let inner = inner.strip_suffix(']').ok_or_else(|| syntax(pos, "unterminated address list"))?;
        let items = split_list(inner)
            .into_iter()
            .map(|(off, part)| parse_addr(part, pos + 1 + off))
            .collect::<Result<Vec<_>, _>>()?;
        return Ok(AddrExpr::List(items));
    }
    if tok == "any" {
        return Ok(AddrExpr::Any);
    }
    if let Some(name) = tok.strip_prefix('$') {
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(syntax(pos, format!("bad variable name `{tok}`")));
        }
        return Ok(AddrExpr::Var(name.to_string()));
    }
    parse_net(tok).map(AddrExpr::Net).ok_or_else(|| syntax(pos, format!("bad address `{tok}`")))
}

/// Parses `a.b.c.d` or `a.b.c.d/n`.
pub(crate) fn parse_net(tok: &str) -> Option<Ipv4Net> {
    if tok.contains('/') {
        tok.parse::<Ipv4Net>().ok().map(|n| n.trunc())
    } else {
        tok.parse::<std::net::Ipv4Addr>().ok().map(|ip| Ipv4Net::new(ip, 32).expect("prefix 32"))
    }
}

fn parse_port(tok: &str, pos: usize) -> Result<PortExpr, RuleError> {
    let lead = tok.len() - tok.trim_start().len();
    let tok = tok.trim();
    let pos = pos + lead;
    if let Some(rest) = tok.strip_prefix('!') {
        return Ok(PortExpr::Not(Box::new(parse_port(rest, pos + 1)?)));
    }
    if let Some(inner) = tok.strip_prefix('[') {
        let inner = inner.strip_suffix(']').ok_or_else(|| syntax(pos, "unterminated port list"))?;
        let items = split_list(inner)
            .into_iter()
            .map(|(off, part)| parse_port(part, pos + 1 + off))
            .collect::<Result<Vec<_>, _>>()?;
        return Ok(PortExpr::List(items));
    }
    if tok == "any" {
        return Ok(PortExpr::Any);
    }
    let num = |s: &str, default: u16| -> Result<u16, RuleError> {
        if s.is_empty() {
            return Ok(default);
        }
        s.parse::<u16>().map_err(|_| syntax(pos, format!("bad port `{tok}`")))
    };
    if let Some((lo, hi)) = tok.split_once(':') {
        let (lo, hi) = (num(lo, 0)?, num(hi, u16::MAX)?);
        if lo > hi {
            return Err(syntax(pos, format!("empty port range `{tok}`")));
        }
        return Ok(PortExpr::Range(lo, hi));
    }
    if tok.is_empty() {
        return Err(syntax(pos, "empty port"));
    }
    Ok(PortExpr::Port(num(tok, 0)?))
}

/// Splits the option list on `;` outside quotes, honouring `\` escapes.
fn split_options(text: &str, base: usize) -> Result<Vec<(usize, &str)>, RuleError> {
    let mut parts = Vec::new();
    let mut in_quotes = false;
    let mut escaped = false;
    let mut start = 0;
    for (i, ch) in text.char_indices() {
        if escaped {
            escaped = false;
            continue;
        }
        match ch {
            '\\' => escaped = true,
            '"' => in_quotes = !in_quotes,
            ';' if !in_quotes => {
                parts.push((base + start, &text[start..i]));
                start = i + 1;
            }
            _ => {}
        }
    }
    if in_quotes {
        return Err(syntax(base + text.len(), "unterminated quoted string"));
    }
    parts.push((base + start, &text[start..]));
    Ok(parts.into_iter().filter(|(_, p)| !p.trim().is_empty()).collect())
}

fn parse_options<'a>(text: &'a str, base: usize) -> Result<Vec<RuleOption>, RuleError> {
    let mut options: Vec<RuleOption> = Vec::new();
    for (pos, raw) in split_options(text, base)? {
        let lead = raw.len() - raw.trim_start().len();
        let pos = pos + lead;
        let raw = raw.trim();
        let (name, value) = match raw.split_once(':') {
            Some((n, v)) => (n.trim(), Some(v.trim())),
            None => (raw, None),
        };
        let need = |v: Option<&'a str>| v.ok_or_else(|| syntax(pos, format!("`{name}` needs a value")));
        match name {
            "content" => {
                let pattern = decode_content(unquote(need(value)?, pos)?.as_str());
                options.push(RuleOption::Content(Content::new(pattern)));
            }
            "offset" | "depth" => {
                let n = parse_u32(need(value)?, pos)?;
                let Some(RuleOption::Content(c)) =
                    options.iter_mut().rev().find(|o| matches!(o, RuleOption::Content(_)))
                else {
                    return Err(syntax(pos, format!("`{name}` must follow a content option")));
                };
                if name == "offset" {
                    c.offset = Some(n);
                } else {
                    if n == 0 {
                        return Err(syntax(pos, "depth must be at least 1"));
                    }
                    c.depth = Some(n);
                }
            }
            "msg" => options.push(RuleOption::Msg(unquote(need(value)?, pos)?)),
            "sid" => options.push(RuleOption::Sid(parse_u32(need(value)?, pos)?)),
            "gid" => options.push(RuleOption::Gid(parse_u32(need(value)?, pos)?)),
            "flow" => options.push(RuleOption::Flow(parse_flow(need(value)?, pos)?)),
            "threshold" => options.push(RuleOption::Threshold(parse_threshold(need(value)?, pos)?)),
            "metadata" => options.push(RuleOption::Metadata(parse_metadata(need(value)?, pos)?)),
            other => return Err(RuleError::UnknownOption(other.to_string())),
        }
    }
    Ok(options)
}

fn parse_u32(v: &str, pos: usize) -> Result<u32, RuleError> {
    v.parse::<u32>().map_err(|_| syntax(pos, format!("expected an unsigned integer, found `{v}`")))
}

fn unquote(v: &str, pos: usize) -> Result<String, RuleError> {
    let inner = v
        .strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .filter(|_| v.len() >= 2)
        .ok_or_else(|| syntax(pos, format!("expected a quoted string, found `{v}`")))?;
    let mut out = String::with_capacity(inner.len());
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some(n) => out.push(n),
                None => return Err(syntax(pos, "dangling escape")),
            }
        } else if c == '"' {
            return Err(syntax(pos, "unescaped quote inside string"));
        } else {
            out.push(c);
        }
    }
    Ok(out)
}

fn is_hex_pair(s: &str) -> bool {
    s.len() == 2 && s.chars().all(|c| c.is_ascii_hexdigit())
}

/// Hex-pair tokens become octets; `|..|` segments are hex; anything else is
/// literal.
pub(crate) fn decode_content(text: &str) -> Vec<u8> {
    if text.contains('|') {
        let mut out = Vec::new();
        for (i, seg) in text.split('|').enumerate() {
            if i % 2 == 1 {
                for pair in seg.split_whitespace() {
                    match u8::from_str_radix(pair, 16) {
                        Ok(b) if is_hex_pair(pair) => out.push(b),
                        _ => out.extend_from_slice(pair.as_bytes()),
                    }
                }
            } else {
                out.extend_from_slice(seg.as_bytes());
            }
        }
        return out;
    }
    let words: Vec<&str> = text.split_whitespace().collect();
    if !words.is_empty() && words.iter().all(|w| is_hex_pair(w)) {
        return words.iter().map(|w| u8::from_str_radix(w, 16).expect("checked hex pair")).collect();
    }
    text.as_bytes().to_vec()
}

fn parse_flow(v: &str, pos: usize) -> Result<Vec<FlowFlag>, RuleError> {
    v.split(',')
        .map(|f| match f.trim() {
            "established" => Ok(FlowFlag::Established),
            "not_established" => Ok(FlowFlag::NotEstablished),
            "to_server" | "from_client" => Ok(FlowFlag::ToServer),
            "to_client" | "from_server" => Ok(FlowFlag::ToClient),
            other => Err(syntax(pos, format!("unknown flow flag `{other}`"))),
        })
        .collect()
}

fn parse_threshold(v: &str, pos: usize) -> Result<Threshold, RuleError> {
    let mut kind = None;
    let mut track = None;
    let mut count = None;
    let mut seconds = None;
    for part in v.split(',') {
        let part = part.trim();
        let (key, val) = part
            .split_once(char::is_whitespace)
            .map(|(k, v)| (k, v.trim()))
            .ok_or_else(|| syntax(pos, format!("threshold field `{part}` has no value")))?;
        match key {
            "type" => {
                kind = Some(match val {
                    "limit" => ThresholdType::Limit,
                    "threshold" => ThresholdType::Threshold,
                    "both" => ThresholdType::Both,
                    _ => return Err(syntax(pos, format!("unknown threshold type `{val}`"))),
                })
            }
            "track" => {
                let normalized: String = val.split_whitespace().collect::<Vec<_>>().join("_");
                track = Some(match normalized.as_str() {
                    "by_src" => Track::BySrc,
                    "by_dst" => Track::ByDst,
                    _ => return Err(syntax(pos, format!("unknown threshold track `{val}`"))),
                })
            }
            "count" => count = Some(parse_u32(val, pos)?),
            "seconds" => seconds = Some(parse_u32(val, pos)?),
            _ => return Err(syntax(pos, format!("unknown threshold field `{key}`"))),
        }
    }
    let missing = |f: &str| syntax(pos, format!("threshold is missing `{f}`"));
    let t = Threshold {
        kind: kind.ok_or_else(|| missing("type"))?,
        track: track.ok_or_else(|| missing("track"))?,
        count: count.ok_or_else(|| missing("count"))?,
        seconds: seconds.ok_or_else(|| missing("seconds"))?,
    };
    if t.count == 0 || t.seconds == 0 {
        return Err(syntax(pos, "threshold count and seconds must be at least 1"));
    }
    Ok(t)
}

fn parse_metadata(v: &str, pos: usize) -> Result<Vec<(String, String)>, RuleError> {
    v.split(',')
        .map(|pair| {
            let pair = pair.trim();
            let (k, val) = pair
                .split_once(char::is_whitespace)
                .ok_or_else(|| syntax(pos, format!("metadata entry `{pair}` needs a key and a value")))?;
            Ok((k.to_string(), val.trim().to_string()))
        })
        .collect()
}
