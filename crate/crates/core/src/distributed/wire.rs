//! Line-delimited JSON messages between sensors and the master.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alert::Alert;

pub const PROTO_VERSION: u32 = 1;
pub const DEFAULT_PORT: u16 = 7000;

/// One alert as forwarded by a sensor; `(sensor_id, seq)` is unique.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlertRecord {
    pub sensor_id: String,
    /// Starts at 1 and grows by one per alert on each sensor.
    pub seq: u64,
    #[serde(flatten)]
    pub alert: Alert,
    /// Master clock at ingestion; absent on the wire.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub received_at_us: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RulePush {
    pub version: u64,
    pub rules: String,
    /// `NAME=CIDR[,CIDR]` lines.
    pub vars: String,
    /// Hex sha256 of `rules`.
    pub sha256: String,
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl RulePush {
    pub fn new(version: u64, rules: impl Into<String>, vars: impl Into<String>) -> Self {
        let rules = rules.into();
        Self { version, sha256: sha256_hex(&rules), rules, vars: vars.into() }
    }

    pub fn checksum_ok(&self) -> bool {
        sha256_hex(&self.rules) == self.sha256
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PushStatus {
    Ok,
    Stale,
    CompileFailed,
    ChecksumMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello {
        sensor_id: String,
        proto_ver: u32,
        #[serde(default)]
        token: String,
        #[serde(default)]
        rule_version: u64,
    },
    Alert(AlertRecord),
    /// Highest seq below which the master holds every alert.
    Ack {
        seq: u64,
    },
    RulePush(RulePush),
    RuleAck {
        sensor_id: String,
        version: u64,
        status: PushStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    Ping,
}

/// One JSON object followed by a newline.
pub fn encode(msg: &Message) -> String {
    let mut s = serde_json::to_string(msg).expect("messages always serialize");
    s.push('\n');
    s
}

pub fn decode(line: &str) -> Result<Message, serde_json::Error> {
    serde_json::from_str(line.trim_end_matches(['\r', '\n']))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::IpProto;
    use crate::rules::Action;
    use std::net::Ipv4Addr;

    pub(crate) fn sample(seq: u64) -> AlertRecord {
        AlertRecord {
            sensor_id: "s1".into(),
            seq,
            alert: Alert {
                ts_us: 1_700_000_000_000_000 + seq,
                sid: 3,
                gid: 1,
                msg: "DNP3 operate from Unknow source".into(),
                rule_pos: Some(0),
                action: Action::Alert,
                src_ip: Ipv4Addr::new(10, 0, 0, 66),
                src_port: 51000,
                dst_ip: Ipv4Addr::new(10, 0, 0, 2),
                dst_port: 20000,
                proto: IpProto::Tcp,
                dnp3_fc: Some(4),
                options_evaluated: 2,
                rule_version: 1,
            },
            received_at_us: None,
        }
    }

    #[test]
    fn alert_round_trip() {
        let m = Message::Alert(sample(7));
        let line = encode(&m);
        assert!(line.ends_with('\n') && !line[..line.len() - 1].contains('\n'));
        assert!(line.starts_with(r#"{"type":"alert","sensor_id":"s1","seq":7,"ts_us":"#));
        assert_eq!(decode(&line).unwrap(), m);
    }

    #[test]
    fn optional_keys_are_omitted() {
        let mut r = sample(1);
        r.alert.dnp3_fc = None;
        r.alert.rule_pos = None;
        let line = encode(&Message::Alert(r.clone()));
        assert!(!line.contains("dnp3_fc") && !line.contains("rule_pos") && !line.contains("received_at_us"));
        assert_eq!(decode(&line).unwrap(), Message::Alert(r));
    }

    #[test]
    fn quotes_are_escaped() {
        let mut r = sample(1);
        r.alert.msg = "say \"hi\"\n".into();
        let line = encode(&Message::Alert(r.clone()));
        assert!(line.contains(r#""msg":"say \"hi\"\n""#));
        assert_eq!(decode(&line).unwrap(), Message::Alert(r));
    }

    #[test]
    fn control_messages() {
        let hello = r#"{"type":"hello","sensor_id":"a","proto_ver":1,"token":"t"}"#;
        assert_eq!(
            decode(hello).unwrap(),
            Message::Hello { sensor_id: "a".into(), proto_ver: 1, token: "t".into(), rule_version: 0 }
        );
        assert_eq!(encode(&Message::Ping), "{\"type\":\"ping\"}\n");
        assert_eq!(encode(&Message::Ack { seq: 3 }), "{\"type\":\"ack\",\"seq\":3}\n");
        let push = RulePush::new(2, "alert icmp any any -> any any (sid:1;)\n", "");
        assert!(push.checksum_ok());
        let line = encode(&Message::RulePush(push.clone()));
        assert!(line.contains("\"sha256\":\""));
        assert_eq!(decode(&line).unwrap(), Message::RulePush(push));
        assert!(decode("{\"type\":\"bogus\"}").is_err());
        assert!(decode("not json").is_err());
    }

    #[test]
    fn sha256_anchor() {
        assert_eq!(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
