//! Classic libpcap capture files (microsecond timestamps, Ethernet link type).

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC_MICROS: u32 = 0xA1B2_C3D4;
pub const LINKTYPE_ETHERNET: u32 = 1;
pub const GLOBAL_HEADER_LEN: usize = 24;
pub const RECORD_HEADER_LEN: usize = 16;
const SNAPLEN: u32 = 65_535;

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("bad pcap magic {0:#010x}")]
    BadMagic(u32),
    #[error("truncated capture record #{index}")]
    TruncatedRecord { index: usize },
    #[error("truncated pcap global header")]
    TruncatedHeader,
    #[error("unsupported link type {0}")]
    UnsupportedLinkType(u32),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

/// One captured frame with its capture timestamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureRecord {
    /// Microseconds since the Unix epoch.
    pub ts_us: u64,
    pub data: Vec<u8>,
}

impl CaptureRecord {
    pub fn new(ts_us: u64, data: Vec<u8>) -> Self {
        Self { ts_us, data }
    }
}

/// Streaming reader over a pcap byte source. Accepts both byte orders.
pub struct CaptureReader<R> {
    inner: R,
    swapped: bool,
    index: usize,
    done: bool,
}

impl CaptureReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, PcapError> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> CaptureReader<R> {
    pub fn new(mut inner: R) -> Result<Self, PcapError> {
        let mut header = [0u8; GLOBAL_HEADER_LEN];
        read_exact_or(&mut inner, &mut header, PcapError::TruncatedHeader)?;
        let le = u32::from_le_bytes(header[0..4].try_into().unwrap());
        let swapped = match le {
            MAGIC_MICROS => false,
            m if m.swap_bytes() == MAGIC_MICROS => true,
            m => return Err(PcapError::BadMagic(m)),
        };
        let field = |b: &[u8]| {
            let v = u32::from_le_bytes(b.try_into().unwrap());
            if swapped {
                v.swap_bytes()
            } else {
                v
            }
        };
        let linktype = field(&header[20..24]);
        if linktype != LINKTYPE_ETHERNET {
            return Err(PcapError::UnsupportedLinkType(linktype));
        }
        Ok(Self { inner, swapped, index: 0, done: false })
    }

    fn u32_at(&self, b: &[u8]) -> u32 {
        let v = u32::from_le_bytes(b.try_into().unwrap());
        if self.swapped {
            v.swap_bytes()
        } else {
            v
        }
    }

    fn next_record(&mut self) -> Result<Option<CaptureRecord>, PcapError> {
        let mut header = [0u8; RECORD_HEADER_LEN];
        let got = read_fully(&mut self.inner, &mut header)?;
        if got == 0 {
            return Ok(None);
        }
        if got < RECORD_HEADER_LEN {
            return Err(PcapError::TruncatedRecord { index: self.index });
        }
        let ts_sec = self.u32_at(&header[0..4]) as u64;
        let ts_usec = self.u32_at(&header[4..8]) as u64;
        let incl_len = self.u32_at(&header[8..12]) as usize;
        let mut data = vec![0u8; incl_len];
        if read_fully(&mut self.inner, &mut data)? < incl_len {
            return Err(PcapError::TruncatedRecord { index: self.index });
        }
        self.index += 1;
        Ok(Some(CaptureRecord { ts_us: ts_sec * 1_000_000 + ts_usec, data }))
    }
}

impl<R: Read> Iterator for CaptureReader<R> {
    type Item = Result<CaptureRecord, PcapError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_record() {
            Ok(Some(r)) => Some(Ok(r)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

fn read_fully<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], err: PcapError) -> Result<(), PcapError> {
    if read_fully(r, buf)? < buf.len() {
        return Err(err);
    }
    Ok(())
}

/// Reads every record of a capture file into memory.
pub fn read_capture(path: impl AsRef<Path>) -> Result<Vec<CaptureRecord>, PcapError> {
    CaptureReader::open(path)?.collect()
}

pub fn read_capture_bytes(bytes: &[u8]) -> Result<Vec<CaptureRecord>, PcapError> {
    CaptureReader::new(bytes)?.collect()
}

/// Streaming writer producing native-order (little-endian) pcap.
pub struct CaptureWriter<W: Write> {
    inner: W,
}

impl<W: Write> CaptureWriter<W> {
    pub fn new(mut inner: W) -> Result<Self, PcapError> {
        let mut header = Vec::with_capacity(GLOBAL_HEADER_LEN);
        header.extend_from_slice(&MAGIC_MICROS.to_le_bytes());
        header.extend_from_slice(&2u16.to_le_bytes());
        header.extend_from_slice(&4u16.to_le_bytes());
        header.extend_from_slice(&0i32.to_le_bytes());
        header.extend_from_slice(&0u32.to_le_bytes());
        header.extend_from_slice(&SNAPLEN.to_le_bytes());
        header.extend_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());
        inner.write_all(&header)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, record: &CaptureRecord) -> Result<(), PcapError> {
        let len = record.data.len() as u32;
        let mut header = [0u8; RECORD_HEADER_LEN];
        header[0..4].copy_from_slice(&((record.ts_us / 1_000_000) as u32).to_le_bytes());
        header[4..8].copy_from_slice(&((record.ts_us % 1_000_000) as u32).to_le_bytes());
        header[8..12].copy_from_slice(&len.to_le_bytes());
        header[12..16].copy_from_slice(&len.to_le_bytes());
        self.inner.write_all(&header)?;
        self.inner.write_all(&record.data)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, PcapError> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub fn write_capture_bytes(records: &[CaptureRecord]) -> Vec<u8> {
    let mut w = CaptureWriter::new(Vec::new()).expect("vec write");
    for r in records {
        w.write(r).expect("vec write");
    }
    w.finish().expect("vec write")
}

pub fn write_capture(records: &[CaptureRecord], path: impl AsRef<Path>) -> Result<(), PcapError> {
    let mut w = CaptureWriter::new(BufWriter::new(File::create(path)?))?;
    for r in records {
        w.write(r)?;
    }
    w.finish()?;
    Ok(())
}
