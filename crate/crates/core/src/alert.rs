//! Detection events raised by a sensor.

use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::packet::{IpProto, ParsedPacket};
use crate::rules::Action;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alert {
    /// Capture time of the triggering packet.
    pub ts_us: u64,
    pub sid: u32,
    pub gid: u32,
    pub msg: String,
    /// Position of the matching rule; `None` for a detector event that no
    /// rule claims.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule_pos: Option<usize>,
    #[serde(default)]
    pub action: Action,
    pub src_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_ip: Ipv4Addr,
    pub dst_port: u16,
    pub proto: IpProto,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dnp3_fc: Option<u8>,
    #[serde(default)]
    pub options_evaluated: u64,
    #[serde(default)]
    pub rule_version: u64,
}

impl Alert {
    /// An alert about `pkt` with the packet fields filled in.
    pub fn for_packet(pkt: &ParsedPacket, gid: u32, sid: u32, msg: impl Into<String>) -> Self {
        Self {
            ts_us: pkt.ts_us,
            sid,
            gid,
            msg: msg.into(),
            rule_pos: None,
            action: Action::Alert,
            src_ip: pkt.src_ip,
            src_port: pkt.src_port,
            dst_ip: pkt.dst_ip,
            dst_port: pkt.dst_port,
            proto: pkt.proto,
            dnp3_fc: pkt.dnp3_function(),
            options_evaluated: 0,
            rule_version: 0,
        }
    }
}

impl std::fmt::Display for Alert {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}:{}] {} {}:{} -> {}:{} {} t={}",
            self.gid,
            self.sid,
            self.msg,
            self.src_ip,
            self.src_port,
            self.dst_ip,
            self.dst_port,
            self.proto.as_str(),
            self.ts_us
        )?;
        if let Some(fc) = self.dnp3_fc {
            write!(f, " fc=0x{fc:02X}")?;
        }
        Ok(())
    }
}
