use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use ipnet::Ipv4Net;
use thiserror::Error;

use super::parse::{parse_net, parse_rule_line};
use super::*;

/// Named address sets referenced as `$NAME` in rule headers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Variables(BTreeMap<String, Vec<Ipv4Net>>);

impl Variables {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, name: impl Into<String>, nets: Vec<Ipv4Net>) {
        self.0.insert(name.into(), nets);
    }

    pub fn with(mut self, name: impl Into<String>, nets: Vec<Ipv4Net>) -> Self {
        self.set(name, nets);
        self
    }

    /// Convenience for host addresses.
    pub fn with_hosts(self, name: impl Into<String>, hosts: &[Ipv4Addr]) -> Self {
        let nets = hosts.iter().map(|ip| Ipv4Net::new(*ip, 32).expect("prefix 32")).collect();
        self.with(name, nets)
    }

    pub fn get(&self, name: &str) -> Option<&[Ipv4Net]> {
        self.0.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Ipv4Net])> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Parses `NAME=CIDR[,CIDR...]` lines; `#` comments and blank lines are
    /// ignored and a leading `$` on the name is optional.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut vars = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, value) =
                line.split_once('=').ok_or_else(|| format!("line {}: expected NAME=CIDR[,CIDR...]", i + 1))?;
            let name = name.trim().trim_start_matches('$');
            let nets = value
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| parse_net(s).ok_or_else(|| format!("line {}: bad address `{s}`", i + 1)))
                .collect::<Result<Vec<_>, _>>()?;
            vars.set(name, nets);
        }
        Ok(vars)
    }

    /// Inverse of [`Variables::parse`].
    pub fn render(&self) -> String {
        self.0
            .iter()
            .map(|(k, v)| {
                let nets: Vec<String> = v.iter().map(|n| n.to_string()).collect();
                format!("{k}={}\n", nets.join(","))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompileError {
    #[error(transparent)]
    Parse(#[from] RuleError),
    #[error("duplicate gid:sid {gid}:{sid} (first defined on line {first_line})")]
    DuplicateSid { gid: u32, sid: u32, first_line: usize },
    #[error("unresolved variable ${0}")]
    UnresolvedVariable(String),
}

/// Every error found in a rule file, tagged with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompileErrors(pub Vec<(usize, CompileError)>);

impl fmt::Display for CompileErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (line, e)) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "line {line}: {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for CompileErrors {}

/// A rule with its header variables resolved to literal address sets.
#[derive(Debug, Clone)]
pub struct CompiledRule {
    pub rule: Rule,
    pub src: AddrExpr,
    pub dst: AddrExpr,
}

#[derive(Debug, Clone)]
pub struct CompiledRuleSet {
    pub rules: Vec<CompiledRule>,
    pub variables: Variables,
    pub version: u64,
    preproc_bindings: HashSet<(u32, u32)>,
}

impl CompiledRuleSet {
    pub fn empty(version: u64) -> Self {
        Self { rules: Vec::new(), variables: Variables::new(), version, preproc_bindings: HashSet::new() }
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// True when a preproc rule claims this detector event.
    pub fn binds(&self, gid: u32, sid: u32) -> bool {
        self.preproc_bindings.contains(&(gid, sid))
    }

    pub fn find(&self, gid: u32, sid: u32) -> Option<&CompiledRule> {
        self.rules.iter().find(|r| r.rule.gid() == gid && r.rule.sid() == sid)
    }
}

fn resolve(e: &AddrExpr, vars: &Variables, missing: &mut Vec<String>) -> AddrExpr {
    match e {
        AddrExpr::Var(name) => match vars.get(name) {
            Some(nets) => AddrExpr::List(nets.iter().copied().map(AddrExpr::Net).collect()),
            None => {
                missing.push(name.clone());
                AddrExpr::List(Vec::new())
            }
        },
        AddrExpr::Not(inner) => AddrExpr::Not(Box::new(resolve(inner, vars, missing))),
        AddrExpr::List(items) => AddrExpr::List(items.iter().map(|i| resolve(i, vars, missing)).collect()),
        other => other.clone(),
    }
}

/// Compiles rule-file text in file order. All line errors are collected
/// before failing.
pub fn compile_ruleset(text: &str, variables: &Variables, version: u64) -> Result<CompiledRuleSet, CompileErrors> {
    let mut errors = Vec::new();
    let mut rules = Vec::new();
    let mut seen: HashMap<(u32, u32), usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let mut rule = match parse_rule_line(line) {
            Ok(Some(r)) => r,
            Ok(None) => continue,
            Err(e) => {
                errors.push((line_no, CompileError::Parse(e)));
                continue;
            }
        };
        let key = (rule.gid(), rule.sid());
        if let Some(&first_line) = seen.get(&key) {
            errors.push((line_no, CompileError::DuplicateSid { gid: key.0, sid: key.1, first_line }));
            continue;
        }
        seen.insert(key, line_no);
        let mut missing = Vec::new();
        let src = resolve(&rule.header.src, variables, &mut missing);
        let dst = resolve(&rule.header.dst, variables, &mut missing);
        if !missing.is_empty() {
            missing.dedup();
            for m in missing {
                errors.push((line_no, CompileError::UnresolvedVariable(m)));
            }
            continue;
        }
        rule.position = rules.len();
        rules.push(CompiledRule { rule, src, dst });
    }
    if !errors.is_empty() {
        return Err(CompileErrors(errors));
    }
    let preproc_bindings = rules.iter().filter(|r| r.rule.is_preproc()).map(|r| (r.rule.gid(), r.rule.sid())).collect();
    Ok(CompiledRuleSet { rules, variables: variables.clone(), version, preproc_bindings })
}
