//! DNP3 link, transport and application layer framing as carried in TCP
//! payloads.
//!
//! Only the single link frame case is handled: transport segments are not
//! reassembled, and application objects are kept as opaque payload.
//!
//! Wire layout of a single-frame message (TCP payload offsets):
//!
//! ```text
//!  0-1  start 05 64          8-9  header CRC (LE)
//!  2    length               10   transport octet
//!  3    link control         11   application control
//!  4-5  destination (LE)     12   function code
//!  6-7  source (LE)          13.. IIN (responses), objects
//! ```
//!
//! User data after the header is sent in blocks of at most 16 octets, each
//! followed by its own CRC.

use std::fmt;

use thiserror::Error;

use crate::crc::{crc16_dnp, crc_matches};

pub const START_OCTETS: [u8; 2] = [0x05, 0x64];
pub const LINK_HEADER_LEN: usize = 10;
pub const BLOCK_LEN: usize = 16;
/// Largest user data (transport + application octets) in one link frame.
pub const MAX_USER_DATA: usize = 250;
/// Offset of the application function code within a single-frame payload.
pub const FUNCTION_CODE_OFFSET: usize = 12;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Dnp3Error {
    #[error("frame does not start with 05 64")]
    BadStartBytes,
    #[error("frame truncated: need {needed} octets, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("link length {0} out of range (minimum 5)")]
    LengthOutOfRange(u8),
    #[error("payload too large: {0} user octets exceeds {MAX_USER_DATA}")]
    PayloadTooLarge(usize),
}

/// Number of on-wire octets (including all CRCs) for a frame whose length
/// field is `length`.
pub fn wire_len_for(length: u8) -> usize {
    let user = (length as usize).saturating_sub(5);
    let blocks = user.div_ceil(BLOCK_LEN);
    LINK_HEADER_LEN + user + 2 * blocks
}

/// Link control octet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LinkControl(pub u8);

impl LinkControl {
    /// Control for an unconfirmed user data frame sent by the master.
    pub const MASTER_USER_DATA: LinkControl = LinkControl(0xC4);
    /// Control for an unconfirmed user data frame sent by an outstation.
    pub const OUTSTATION_USER_DATA: LinkControl = LinkControl(0x44);

    /// DIR bit: set on frames sent by the master.
    pub fn dir(self) -> bool {
        self.0 & 0x80 != 0
    }

    pub fn prm(self) -> bool {
        self.0 & 0x40 != 0
    }

    pub fn fcb(self) -> bool {
        self.0 & 0x20 != 0
    }

    pub fn fcv(self) -> bool {
        self.0 & 0x10 != 0
    }

    pub fn function(self) -> u8 {
        self.0 & 0x0F
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkHeader {
    pub control: LinkControl,
    pub destination: u16,
    pub source: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransportHeader {
    pub fin: bool,
    pub fir: bool,
    pub sequence: u8,
}

impl TransportHeader {
    pub fn single(sequence: u8) -> Self {
        Self { fin: true, fir: true, sequence: sequence & 0x3F }
    }

    pub fn from_octet(octet: u8) -> Self {
        Self { fin: octet & 0x80 != 0, fir: octet & 0x40 != 0, sequence: octet & 0x3F }
    }

    pub fn to_octet(self) -> u8 {
        (self.fin as u8) << 7 | (self.fir as u8) << 6 | (self.sequence & 0x3F)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApplicationHeader {
    /// FIR/FIN/CON/UNS flags in the high nibble, sequence in the low nibble.
    pub control: u8,
    pub function_code: u8,
    pub internal_indications: Option<u16>,
}

impl ApplicationHeader {
    pub fn request(sequence: u8, function_code: u8) -> Self {
        Self { control: 0xC0 | (sequence & 0x0F), function_code, internal_indications: None }
    }

    pub fn response(sequence: u8, function_code: u8, iin: u16) -> Self {
        Self { control: 0xC0 | (sequence & 0x0F), function_code, internal_indications: Some(iin) }
    }

    pub fn sequence(&self) -> u8 {
        self.control & 0x0F
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Request,
    Response,
}

/// Per-block CRC validity of a parsed frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrcStatus {
    pub header: bool,
    pub blocks: Vec<bool>,
}

impl CrcStatus {
    pub fn all_valid(&self) -> bool {
        self.header && self.blocks.iter().all(|&ok| ok)
    }
}

/// One decoded DNP3 link frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dnp3Frame {
    pub link: LinkHeader,
    /// Absent for link-only frames (length 5).
    pub transport: Option<TransportHeader>,
    /// Absent when the user data is too short to hold control + function code.
    pub app: Option<ApplicationHeader>,
    /// Application octets after the application header.
    pub payload: Vec<u8>,
    pub crc: CrcStatus,
}

impl Dnp3Frame {
    /// Builds a single-fragment request from the master.
    pub fn request(destination: u16, source: u16, function_code: u8, payload: Vec<u8>) -> Self {
        Self {
            link: LinkHeader { control: LinkControl::MASTER_USER_DATA, destination, source },
            transport: Some(TransportHeader::single(0)),
            app: Some(ApplicationHeader::request(0, function_code)),
            payload,
            crc: CrcStatus { header: true, blocks: Vec::new() },
        }
    }

    /// Builds a single-fragment solicited response from an outstation.
    pub fn response(destination: u16, source: u16, iin: u16, payload: Vec<u8>) -> Self {
        Self {
            link: LinkHeader { control: LinkControl::OUTSTATION_USER_DATA, destination, source },
            transport: Some(TransportHeader::single(0)),
            app: Some(ApplicationHeader::response(0, 0x81, iin)),
            payload,
            crc: CrcStatus { header: true, blocks: Vec::new() },
        }
    }

    pub fn with_sequences(mut self, transport_seq: u8, app_seq: u8) -> Self {
        if let Some(t) = self.transport.as_mut() {
            t.sequence = transport_seq & 0x3F;
        }
        if let Some(a) = self.app.as_mut() {
            a.control = (a.control & 0xF0) | (app_seq & 0x0F);
        }
        self
    }

    pub fn direction(&self) -> Direction {
        if self.link.control.dir() {
            Direction::Request
        } else {
            Direction::Response
        }
    }

    pub fn is_request(&self) -> bool {
        self.direction() == Direction::Request
    }

    pub fn function_code(&self) -> Option<u8> {
        self.app.as_ref().map(|a| a.function_code)
    }

    /// False when the DIR bit disagrees with the function code range
    /// (requests are 0x00-0x21, responses 0x81-0x83).
    pub fn direction_consistent(&self) -> bool {
        match (self.function_code(), self.direction()) {
            (None, _) => true,
            (Some(fc), Direction::Request) => fc <= 0x21,
            (Some(fc), Direction::Response) => is_response_code(fc),
        }
    }

    /// Number of user data octets (transport + application).
    pub fn user_data_len(&self) -> usize {
        let transport = self.transport.is_some() as usize;
        let app = match &self.app {
            None => 0,
            Some(a) => 2 + if a.internal_indications.is_some() { 2 } else { 0 },
        };
        transport + app + self.payload.len()
    }

    pub fn wire_len(&self) -> usize {
        wire_len_for((self.user_data_len() + 5).min(255) as u8)
    }

    fn user_data(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.user_data_len());
        if let Some(t) = self.transport {
            out.push(t.to_octet());
        }
        if let Some(a) = &self.app {
            out.push(a.control);
            out.push(a.function_code);
            if let Some(iin) = a.internal_indications {
                out.extend_from_slice(&iin.to_be_bytes());
            }
        }
        out.extend_from_slice(&self.payload);
        out
    }
}

pub fn is_response_code(fc: u8) -> bool {
    (0x81..=0x83).contains(&fc)
}

/// Parses one link frame from the start of `bytes`. Trailing octets beyond
/// the frame are ignored; use [`Dnp3Frame::wire_len`] to advance.
pub fn parse_frame(bytes: &[u8]) -> Result<Dnp3Frame, Dnp3Error> {
    if bytes.len() < 2 || bytes[..2] != START_OCTETS {
        return Err(Dnp3Error::BadStartBytes);
    }
    if bytes.len() < LINK_HEADER_LEN {
        return Err(Dnp3Error::Truncated { needed: LINK_HEADER_LEN, available: bytes.len() });
    }
    let length = bytes[2];
    if length < 5 {
        return Err(Dnp3Error::LengthOutOfRange(length));
    }
    let needed = wire_len_for(length);
    if bytes.len() < needed {
        return Err(Dnp3Error::Truncated { needed, available: bytes.len() });
    }

    let header_ok = crc_matches(&bytes[..8], [bytes[8], bytes[9]]);
    let link = LinkHeader {
        control: LinkControl(bytes[3]),
        destination: u16::from_le_bytes([bytes[4], bytes[5]]),
        source: u16::from_le_bytes([bytes[6], bytes[7]]),
    };

    let user_len = length as usize - 5;
    let mut user = Vec::with_capacity(user_len);
    let mut blocks = Vec::new();
    let mut pos = LINK_HEADER_LEN;
    let mut remaining = user_len;
    while remaining > 0 {
        let n = remaining.min(BLOCK_LEN);
        let data = &bytes[pos..pos + n];
        blocks.push(crc_matches(data, [bytes[pos + n], bytes[pos + n + 1]]));
        user.extend_from_slice(data);
        pos += n + 2;
        remaining -= n;
    }

    let transport = user.first().map(|&b| TransportHeader::from_octet(b));
    let (app, payload_start) = if user.len() >= 3 {
        let fc = user[2];
        if is_response_code(fc) && user.len() >= 5 {
            let iin = u16::from_be_bytes([user[3], user[4]]);
            (Some(ApplicationHeader { control: user[1], function_code: fc, internal_indications: Some(iin) }), 5)
        } else {
            (Some(ApplicationHeader { control: user[1], function_code: fc, internal_indications: None }), 3)
        }
    } else {
        (None, user.len().min(1))
    };

    Ok(Dnp3Frame {
        link,
        transport,
        app,
        payload: user[payload_start..].to_vec(),
        crc: CrcStatus { header: header_ok, blocks },
    })
}

/// Serializes a frame with a computed length field and fresh CRCs.
pub fn encode_frame(frame: &Dnp3Frame) -> Result<Vec<u8>, Dnp3Error> {
    let user = frame.user_data();
    if user.len() > MAX_USER_DATA {
        return Err(Dnp3Error::PayloadTooLarge(user.len()));
    }
    let length = (user.len() + 5) as u8;
    let mut out = Vec::with_capacity(wire_len_for(length));
    out.extend_from_slice(&START_OCTETS);
    out.push(length);
    out.push(frame.link.control.0);
    out.extend_from_slice(&frame.link.destination.to_le_bytes());
    out.extend_from_slice(&frame.link.source.to_le_bytes());
    let header_crc = crc16_dnp(&out);
    out.extend_from_slice(&header_crc.to_le_bytes());
    for block in user.chunks(BLOCK_LEN) {
        out.extend_from_slice(block);
        out.extend_from_slice(&crc16_dnp(block).to_le_bytes());
    }
    Ok(out)
}

/// Verifies only the link header CRC of a candidate frame. `None` when fewer
/// than ten octets are available.
pub fn header_crc_valid(bytes: &[u8]) -> Option<bool> {
    (bytes.len() >= LINK_HEADER_LEN).then(|| crc_matches(&bytes[..8], [bytes[8], bytes[9]]))
}

const FUNCTION_NAMES: [&str; 31] = [
    "Confirm",
    "Read",
    "Write",
    "Select",
    "Operate",
    "Dir operate",
    "Dir operate-No resp",
    "Freeze",
    "Freeze-No resp",
    "Freeze clear",
    "Freeze clear-No resp",
    "Freeze at time",
    "Freeze at time-No resp",
    "Cold restart",
    "Warm restart",
    "Initialize data",
    "Initialize application",
    "Start application",
    "Stop application",
    "Save configuration",
    "Enable unsolicited",
    "Disable unsolicited",
    "Assign class",
    "Delay measurement",
    "Record current time",
    "Open file",
    "Close file",
    "Delete file",
    "Get file information",
    "Authenticate file",
    "Abort file",
];

/// Request function code name, or `Unknown(0xNN)` outside 0x00-0x1E.
pub fn describe_function(code: u8) -> String {
    FUNCTION_NAMES.get(code as usize).map(|s| s.to_string()).unwrap_or_else(|| format!("Unknown(0x{code:02X})"))
}

/// Like [`describe_function`] but also names the response codes.
pub fn display_function(code: u8) -> String {
    match code {
        0x81 => "Response".to_string(),
        0x82 => "Unsolicited response".to_string(),
        0x83 => "Authentication response".to_string(),
        _ => describe_function(code),
    }
}

pub mod fc {
    pub const CONFIRM: u8 = 0x00;
    pub const READ: u8 = 0x01;
    pub const WRITE: u8 = 0x02;
    pub const SELECT: u8 = 0x03;
    pub const OPERATE: u8 = 0x04;
    pub const DIRECT_OPERATE: u8 = 0x05;
    pub const DIRECT_OPERATE_NR: u8 = 0x06;
    pub const COLD_RESTART: u8 = 0x0D;
    pub const WARM_RESTART: u8 = 0x0E;
    pub const STOP_APPLICATION: u8 = 0x12;
    pub const ENABLE_UNSOLICITED: u8 = 0x14;
    pub const DISABLE_UNSOLICITED: u8 = 0x15;
    pub const RESPONSE: u8 = 0x81;
}

/// A set of function codes, e.g. the critical commands.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionSet([bool; 256]);

impl FunctionSet {
    pub fn empty() -> Self {
        Self([false; 256])
    }

    pub fn from_codes(codes: impl IntoIterator<Item = u8>) -> Self {
        let mut set = Self::empty();
        for c in codes {
            set.0[c as usize] = true;
        }
        set
    }

    pub fn contains(&self, code: u8) -> bool {
        self.0[code as usize]
    }

    pub fn codes(&self) -> impl Iterator<Item = u8> + '_ {
        (0..=255u8).filter(|&c| self.0[c as usize])
    }

    pub fn is_empty(&self) -> bool {
        !self.0.iter().any(|&b| b)
    }
}

pub const DEFAULT_CRITICAL: [u8; 8] = [
    fc::SELECT,
    fc::OPERATE,
    fc::DIRECT_OPERATE,
    fc::DIRECT_OPERATE_NR,
    fc::COLD_RESTART,
    fc::WARM_RESTART,
    fc::STOP_APPLICATION,
    fc::DISABLE_UNSOLICITED,
];

impl Default for FunctionSet {
    /// The default critical set.
    fn default() -> Self {
        Self::from_codes(DEFAULT_CRITICAL)
    }
}

/// True iff `code` is in the default critical set.
pub fn is_critical(code: u8) -> bool {
    DEFAULT_CRITICAL.contains(&code)
}

pub const DEFAULT_BROADCAST: [u16; 3] = [0xFFFD, 0xFFFE, 0xFFFF];

/// Link destination addresses treated as broadcast.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BroadcastSet(Vec<u16>);

impl BroadcastSet {
    pub fn new(addresses: impl IntoIterator<Item = u16>) -> Self {
        let mut v: Vec<u16> = addresses.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        Self(v)
    }

    pub fn contains(&self, address: u16) -> bool {
        self.0.binary_search(&address).is_ok()
    }
}

impl Default for BroadcastSet {
    fn default() -> Self {
        Self::new(DEFAULT_BROADCAST)
    }
}

pub fn is_broadcast(destination: u16) -> bool {
    DEFAULT_BROADCAST.contains(&destination)
}

impl fmt::Display for Dnp3Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dst_addr={} src_addr={}", self.link.destination, self.link.source)?;
        if let Some(code) = self.function_code() {
            write!(f, " fc=0x{code:02X} {}", display_function(code))?;
        }
        write!(f, " crc={}", if self.crc.all_valid() { "ok" } else { "bad" })
    }
}
