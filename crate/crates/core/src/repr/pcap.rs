//! Classic libpcap capture files (not pcapng).

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const LINKTYPE_ETHERNET: u32 = 1;

const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp {
    pub secs: u32,
    pub nanos: u32,
}

impl Timestamp {
    pub fn new(secs: u32, nanos: u32) -> Self {
        Self { secs, nanos }
    }

    pub fn as_secs_f64(&self) -> f64 {
        self.secs as f64 + self.nanos as f64 * 1e-9
    }
}

/// One captured frame, link layer onward.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawPacket {
    pub timestamp: Timestamp,
    pub link_bytes: Vec<u8>,
    pub orig_len: u32,
}

#[derive(Clone, Copy, Debug)]
struct Format {
    big_endian: bool,
    nanos: bool,
}

impl Format {
    fn u32_at(&self, b: &[u8], off: usize) -> u32 {
        let raw = [b[off], b[off + 1], b[off + 2], b[off + 3]];
        if self.big_endian {
            u32::from_be_bytes(raw)
        } else {
            u32::from_le_bytes(raw)
        }
    }
}

/// Read and parse a capture file.
pub fn parse_capture(path: impl AsRef<Path>) -> Result<Vec<RawPacket>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_capture_bytes(&bytes)
}

/// Parse an in-memory capture. Packets are returned in file order.
pub fn parse_capture_bytes(bytes: &[u8]) -> Result<Vec<RawPacket>> {
    if bytes.len() < 4 {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("truncated global header ({} bytes)", bytes.len()),
        });
    }
    let magic = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let fmt = match magic {
        0xa1b2_c3d4 => Format {
            big_endian: false,
            nanos: false,
        },
        0xd4c3_b2a1 => Format {
            big_endian: true,
            nanos: false,
        },
        0xa1b2_3c4d => Format {
            big_endian: false,
            nanos: true,
        },
        0x4d3c_b2a1 => Format {
            big_endian: true,
            nanos: true,
        },
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "unknown capture magic {other:#010x}"
            )))
        }
    };
    if bytes.len() < GLOBAL_HEADER_LEN {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("truncated global header ({} bytes)", bytes.len()),
        });
    }
    let snaplen = fmt.u32_at(bytes, 16);
    let linktype = fmt.u32_at(bytes, 20);
    if linktype != LINKTYPE_ETHERNET {
        return Err(Error::UnsupportedFormat(format!(
            "link type {linktype} (only Ethernet is supported)"
        )));
    }

    let mut packets = Vec::new();
    let mut off = GLOBAL_HEADER_LEN;
    while off < bytes.len() {
        if bytes.len() - off < RECORD_HEADER_LEN {
            return Err(Error::Parse {
                offset: off,
                msg: "truncated record header".into(),
            });
        }
        let secs = fmt.u32_at(bytes, off);
        let frac = fmt.u32_at(bytes, off + 4);
        let incl_len = fmt.u32_at(bytes, off + 8) as usize;
        let orig_len = fmt.u32_at(bytes, off + 12);
        if snaplen != 0 && incl_len > snaplen as usize {
            return Err(Error::Parse {
                offset: off,
                msg: format!("record length {incl_len} exceeds snaplen {snaplen}"),
            });
        }
        let body = off + RECORD_HEADER_LEN;
        if bytes.len() - body < incl_len {
            return Err(Error::Parse {
                offset: off,
                msg: format!(
                    "truncated record: {incl_len} bytes declared, {} available",
                    bytes.len() - body
                ),
            });
        }
        let nanos = if fmt.nanos {
            frac
        } else {
            frac.saturating_mul(1000)
        };
        packets.push(RawPacket {
            timestamp: Timestamp::new(secs, nanos),
            link_bytes: bytes[body..body + incl_len].to_vec(),
            orig_len: orig_len.max(incl_len as u32),
        });
        off = body + incl_len;
    }
    Ok(packets)
}

/// Serialize packets as a little-endian microsecond Ethernet capture.
pub fn encode_capture(packets: &[RawPacket], snaplen: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(GLOBAL_HEADER_LEN + packets.len() * 80);
    out.extend_from_slice(&0xa1b2_c3d4u32.to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&4u16.to_le_bytes());
    out.extend_from_slice(&0i32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&snaplen.to_le_bytes());
    out.extend_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());
    for p in packets {
        out.extend_from_slice(&p.timestamp.secs.to_le_bytes());
        out.extend_from_slice(&(p.timestamp.nanos / 1000).to_le_bytes());
        out.extend_from_slice(&(p.link_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&p.orig_len.to_le_bytes());
        out.extend_from_slice(&p.link_bytes);
    }
    out
}

pub fn write_capture(path: impl AsRef<Path>, packets: &[RawPacket]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_capture(packets, 65535))
        .map_err(|e| Error::io(path, e))
}
