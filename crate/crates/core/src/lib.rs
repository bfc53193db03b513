//! Signature and protocol-aware intrusion detection for DNP3 over TCP.

pub mod alert;
pub mod bench;
pub mod config;
pub mod crc;
pub mod detectors;
pub mod distributed;
pub mod dnp3;
pub mod flow;
pub mod packet;
pub mod pcap;
pub mod pipeline;
pub mod rulegen;
pub mod rules;
pub mod synth;
