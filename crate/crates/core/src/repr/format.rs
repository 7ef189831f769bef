//! `NMSTRIDE` sample files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "NMSTRIDE"
//! version   u16
//! packets, header_bytes, payload_bytes, stride_len, classes, count   u32 each
//! count × { label u32, flow bytes [packets × (header_bytes + payload_bytes)] }
//! ```
//!
//! A label of `u32::MAX` marks an unlabeled sample.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ReprConfig;
use crate::error::{Error, Result};

pub const STRIDE_MAGIC: &[u8; 8] = b"NMSTRIDE";
pub const STRIDE_VERSION: u16 = 1;
pub const UNLABELED: u32 = u32::MAX;

const HEADER_LEN: usize = 8 + 2 + 6 * 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrideHeader {
    pub packets: u32,
    pub header_bytes: u32,
    pub payload_bytes: u32,
    pub stride_len: u32,
    pub classes: u32,
}

impl StrideHeader {
    pub fn from_config(cfg: &ReprConfig, classes: usize) -> Self {
        Self {
            packets: cfg.packets as u32,
            header_bytes: cfg.header_bytes as u32,
            payload_bytes: cfg.payload_bytes as u32,
            stride_len: cfg.stride_len as u32,
            classes: classes as u32,
        }
    }

    pub fn flow_len(&self) -> usize {
        self.packets as usize * (self.header_bytes as usize + self.payload_bytes as usize)
    }

    pub fn n_strides(&self) -> usize {
        self.flow_len() / self.stride_len.max(1) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StrideRecord {
    pub label: Option<u32>,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StrideFile {
    pub header: StrideHeader,
    pub records: Vec<StrideRecord>,
}

impl StrideFile {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        let lb = h.flow_len();
        let mut out = Vec::with_capacity(HEADER_LEN + self.records.len() * (lb + 4));
        out.extend_from_slice(STRIDE_MAGIC);
        out.extend_from_slice(&STRIDE_VERSION.to_le_bytes());
        for v in [
            h.packets,
            h.header_bytes,
            h.payload_bytes,
            h.stride_len,
            h.classes,
            self.records.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.bytes.len() != lb {
                return Err(Error::Data {
                    index: i,
                    msg: format!("sample has {} bytes, header implies {lb}", r.bytes.len()),
                });
            }
            out.extend_from_slice(&r.label.unwrap_or(UNLABELED).to_le_bytes());
            out.extend_from_slice(&r.bytes);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Parse {
                offset: bytes.len(),
                msg: "truncated sample file header".into(),
            });
        }
        if &bytes[..8] != STRIDE_MAGIC {
            return Err(Error::UnsupportedFormat("missing NMSTRIDE magic".into()));
        }
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != STRIDE_VERSION {
            return Err(Error::UnsupportedFormat(format!(
                "sample file version {version}"
            )));
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let header = StrideHeader {
            packets: u32_at(10),
            header_bytes: u32_at(14),
            payload_bytes: u32_at(18),
            stride_len: u32_at(22),
            classes: u32_at(26),
        };
        let count = u32_at(30) as usize;
        let lb = header.flow_len();
        if header.stride_len == 0 || !lb.is_multiple_of(header.stride_len as usize) {
            return Err(Error::Parse {
                offset: 22,
                msg: format!(
                    "flow length {lb} not divisible by stride {}",
                    header.stride_len
                ),
            });
        }
        let expected = HEADER_LEN + count * (lb + 4);
        if bytes.len() != expected {
            return Err(Error::Parse {
                offset: bytes.len().min(expected),
                msg: format!(
                    "expected {expected} bytes for {count} samples, found {}",
                    bytes.len()
                ),
            });
        }
        let records = bytes[HEADER_LEN..]
            .chunks_exact(lb + 4)
            .map(|rec| {
                let label = u32::from_le_bytes(rec[..4].try_into().unwrap());
                StrideRecord {
                    label: (label != UNLABELED).then_some(label),
                    bytes: rec[4..].to_vec(),
                }
            })
            .collect();
        Ok(Self { header, records })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// JSON side file describing a set of sample files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Class names indexed by label.
    pub classes: Vec<String>,
    pub repr: Option<ReprConfig>,
    pub seed: u64,
    pub splits: std::collections::BTreeMap<String, usize>,
}

impl Manifest {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> StrideFile {
        StrideFile {
            header: StrideHeader {
                packets: 2,
                header_bytes: 3,
                payload_bytes: 1,
                stride_len: 4,
                classes: 2,
            },
            records: vec![
                StrideRecord {
                    label: Some(1),
                    bytes: (0..8).collect(),
                },
                StrideRecord {
                    label: None,
                    bytes: vec![9; 8],
                },
            ],
        }
    }

    #[test]
    fn byte_layout() {
        let enc = small().encode().unwrap();
        assert_eq!(&enc[..8], b"NMSTRIDE");
        assert_eq!(&enc[8..10], &[1, 0]);
        assert_eq!(&enc[10..14], &[2, 0, 0, 0]);
        assert_eq!(&enc[30..34], &[2, 0, 0, 0]);
        assert_eq!(&enc[34..38], &[1, 0, 0, 0]);
        assert_eq!(&enc[38..46], &[0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(&enc[46..50], &[0xff; 4]);
        assert_eq!(enc.len(), 34 + 2 * 12);
    }

    #[test]
    fn round_trip() {
        let f = small();
        assert_eq!(StrideFile::decode(&f.encode().unwrap()).unwrap(), f);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let enc = small().encode().unwrap();
        assert!(matches!(
            StrideFile::decode(&enc[..enc.len() - 1]),
            Err(Error::Parse { .. })
        ));
        let mut bad = enc.clone();
        bad[0] = b'X';
        assert!(matches!(
            StrideFile::decode(&bad),
            Err(Error::UnsupportedFormat(_))
        ));
        let mut f = small();
        f.records[0].bytes.pop();
        assert!(matches!(f.encode(), Err(Error::Data { index: 0, .. })));
    }
}
