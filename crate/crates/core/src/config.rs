//! Flat `key=value` configuration files.

use std::collections::BTreeMap;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::time::Duration;

use ipnet::Ipv4Net;
use thiserror::Error;

use crate::detectors::AddressSet;
use crate::distributed::DEFAULT_SPOOL;
use crate::pipeline::Mode;
use crate::rules::Variables;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("key `{key}`: cannot use `{value}`: {reason}")]
    Invalid { key: String, value: String, reason: String },
    #[error("{0}")]
    Conflict(&'static str),
}

/// Ordered key/value pairs; later assignments win.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues(pub BTreeMap<String, String>);

impl KeyValues {
    /// Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax { line: i + 1, reason: "expected key=value".into() });
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1, reason: "empty key".into() });
            }
            map.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self(map))
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.0.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn require(&self, key: &'static str) -> Result<&str, ConfigError> {
        self.get(key).filter(|v| !v.is_empty()).ok_or(ConfigError::Missing(key))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse().map_err(|e: T::Err| ConfigError::Invalid {
                    key: key.into(),
                    value: v.into(),
                    reason: e.to_string(),
                })
            })
            .transpose()
    }

    /// `var.NAME=CIDR[,CIDR]` entries.
    pub fn variables(&self) -> Result<Variables, ConfigError> {
        let text: String =
            self.0.iter().filter_map(|(k, v)| k.strip_prefix("var.").map(|n| format!("{n}={v}\n"))).collect();
        Variables::parse(&text).map_err(|reason| ConfigError::Invalid {
            key: "var".into(),
            value: text.clone(),
            reason,
        })
    }
}

fn parse_hosts(key: &str, value: &str) -> Result<Vec<Ipv4Net>, ConfigError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<Ipv4Net>()
                .or_else(|_| s.parse::<Ipv4Addr>().map(Ipv4Net::from))
                .map_err(|e| ConfigError::Invalid { key: key.into(), value: s.into(), reason: e.to_string() })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    File(PathBuf),
    /// A pcap stream on standard input.
    Stdin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorConfig {
    pub sensor_id: String,
    /// No uplink when absent.
    pub master: Option<SocketAddr>,
    pub token: String,
    pub rules_path: PathBuf,
    pub variables: Variables,
    pub authorized_masters: AddressSet,
    pub select_timeout: Duration,
    pub mode: Mode,
    pub source: Source,
    pub output: Option<PathBuf>,
    pub spool_size: usize,
    pub evaluate_all: bool,
}

impl SensorConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self, ConfigError> {
        let mode = kv.parsed::<Mode>("mode")?.unwrap_or(Mode::Ids);
        let source = match kv.require("source")? {
            "-" | "stdin" => Source::Stdin,
            path => Source::File(path.into()),
        };
        let output = kv.get("output").filter(|v| !v.is_empty()).map(PathBuf::from);
        match (mode, &source, &output) {
            (Mode::Ids, _, Some(_)) => return Err(ConfigError::Conflict("ids mode forbids an output capture")),
            (Mode::Ips, Source::File(_), None) => {
                return Err(ConfigError::Conflict("ips mode over a file needs an output capture"))
            }
            _ => {}
        }
        let timeout_s = kv.parsed::<f64>("select_timeout")?.unwrap_or(10.0);
        if !(timeout_s.is_finite() && timeout_s > 0.0) {
            return Err(ConfigError::Invalid {
                key: "select_timeout".into(),
                value: timeout_s.to_string(),
                reason: "must be positive seconds".into(),
            });
        }
        Ok(Self {
            sensor_id: kv.require("sensor_id")?.to_string(),
            master: kv.parsed("master")?,
            token: kv.get("token").unwrap_or_default().to_string(),
            rules_path: kv.require("rules")?.into(),
            variables: kv.variables()?,
            authorized_masters: AddressSet(parse_hosts(
                "authorized_masters",
                kv.get("authorized_masters").unwrap_or(""),
            )?),
            select_timeout: Duration::from_secs_f64(timeout_s),
            mode,
            source,
            output,
            spool_size: kv.parsed("spool_size")?.unwrap_or(DEFAULT_SPOOL),
            evaluate_all: kv.parsed("evaluate_all")?.unwrap_or(false),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MasterFileConfig {
    pub listen: SocketAddr,
    pub store: PathBuf,
    pub token: String,
}

impl MasterFileConfig {
    pub fn from_kv(kv: &KeyValues) -> Result<Self, ConfigError> {
        Ok(Self {
            listen: kv
                .parsed("listen")?
                .unwrap_or_else(|| SocketAddr::from(([0, 0, 0, 0], crate::distributed::DEFAULT_PORT))),
            store: kv.require("store")?.into(),
            token: kv.get("token").unwrap_or_default().to_string(),
        })
    }
}
