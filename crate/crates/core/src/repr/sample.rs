use serde::{Deserialize, Serialize};

use super::config::ReprConfig;
use super::flow::{FiveTuple, FlowRecord};
use super::packet::{classify_and_strip, packet_bytes};
use crate::error::{Error, Result};

/// One flow as a fixed number of equal-length strides, stored contiguously.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StrideSample {
    bytes: Vec<u8>,
    stride_len: usize,
    pub flow_key: FiveTuple,
    pub label: Option<u32>,
}

impl StrideSample {
    pub fn new(
        bytes: Vec<u8>,
        stride_len: usize,
        flow_key: FiveTuple,
        label: Option<u32>,
    ) -> Result<Self> {
        if stride_len == 0 || !bytes.len().is_multiple_of(stride_len) {
            return Err(Error::shape("stride_sample", &[bytes.len()], &[stride_len]));
        }
        Ok(Self {
            bytes,
            stride_len,
            flow_key,
            label,
        })
    }

    pub fn stride_len(&self) -> usize {
        self.stride_len
    }

    pub fn n_strides(&self) -> usize {
        self.bytes.len() / self.stride_len
    }

    pub fn stride(&self, i: usize) -> &[u8] {
        &self.bytes[i * self.stride_len..(i + 1) * self.stride_len]
    }

    pub fn strides(&self) -> std::slice::ChunksExact<'_, u8> {
        self.bytes.chunks_exact(self.stride_len)
    }

    /// The whole flow byte array.
    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }
}

/// Per-packet `crop_pad` outputs of the first M usable packets of `flow`.
pub fn flow_packet_rows(flow: &FlowRecord, cfg: &ReprConfig) -> Vec<Vec<u8>> {
    let mut rows = Vec::with_capacity(cfg.packets);
    for p in &flow.packets {
        if rows.len() == cfg.packets {
            break;
        }
        let row = classify_and_strip(p, cfg)
            .and_then(|ip| ip.map(|ip| packet_bytes(&ip, cfg)).transpose());
        match row {
            Ok(Some(r)) => rows.push(r),
            Ok(None) => {}
            Err(e) => log::debug!("skipping packet while building sample: {e}"),
        }
    }
    rows
}

/// Concatenate the first M packets (zero-padded to M) and cut into strides.
pub fn build_sample(flow: &FlowRecord, cfg: &ReprConfig) -> Result<StrideSample> {
    cfg.validate()?;
    let rows = flow_packet_rows(flow, cfg);
    if rows.is_empty() {
        return Err(Error::EmptyFlow);
    }
    let mut bytes = Vec::with_capacity(cfg.flow_len());
    for r in &rows {
        bytes.extend_from_slice(r);
    }
    bytes.resize(cfg.flow_len(), 0);
    StrideSample::new(bytes, cfg.stride_len, flow.key, flow.label)
}

/// Order in which flow bytes are grouped into tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenLayout {
    /// Consecutive stride-length runs.
    #[default]
    Stride,
    /// 2-D patches of two half-stride rows from the flow array laid out as a
    /// square, flattened row-major. Same token count and width as strides.
    Patch,
}

impl std::str::FromStr for TokenLayout {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "stride" => Ok(Self::Stride),
            "patch" => Ok(Self::Patch),
            other => Err(format!(
                "unknown token layout `{other}` (expected stride|patch)"
            )),
        }
    }
}

impl TokenLayout {
    pub fn check(&self, flow_len: usize, stride_len: usize) -> Result<()> {
        self.permutation(flow_len, stride_len).map(|_| ())
    }

    /// `perm[i]` is the source byte index of output byte `i`.
    pub fn permutation(&self, flow_len: usize, stride_len: usize) -> Result<Vec<usize>> {
        match self {
            Self::Stride => Ok((0..flow_len).collect()),
            Self::Patch => {
                let side = (flow_len as f64).sqrt().round() as usize;
                let (ph, pw) = (2, stride_len / 2);
                if side * side != flow_len
                    || !stride_len.is_multiple_of(2)
                    || !side.is_multiple_of(ph)
                    || !side.is_multiple_of(pw.max(1))
                {
                    return Err(Error::Config(format!(
                        "patch layout needs a square flow length with side divisible by 2 and {pw}; \
                         got {flow_len} bytes with stride {stride_len}"
                    )));
                }
                let mut perm = Vec::with_capacity(flow_len);
                for pr in 0..side / ph {
                    for pc in 0..side / pw {
                        for r in 0..ph {
                            for c in 0..pw {
                                perm.push((pr * ph + r) * side + pc * pw + c);
                            }
                        }
                    }
                }
                Ok(perm)
            }
        }
    }

    pub fn apply(&self, bytes: &[u8], stride_len: usize) -> Result<Vec<u8>> {
        Ok(self
            .permutation(bytes.len(), stride_len)?
            .into_iter()
            .map(|i| bytes[i])
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::repr::craft::FrameSpec;
    use crate::repr::packet::split_header_payload;
    use crate::repr::pcap::{RawPacket, Timestamp};

    fn flow_of(frames: Vec<Vec<u8>>) -> FlowRecord {
        let packets = frames
            .into_iter()
            .enumerate()
            .map(|(i, f)| RawPacket {
                timestamp: Timestamp::new(i as u32, 0),
                orig_len: f.len() as u32,
                link_bytes: f,
            })
            .collect();
        FlowRecord {
            key: FiveTuple::default(),
            packets,
            label: Some(3),
        }
    }

    #[test]
    fn default_geometry() {
        let spec = FrameSpec::tcp([1, 2, 3, 4], [5, 6, 7, 8], 10, 20);
        let flow = flow_of((0..7).map(|_| spec.build(&[0x55; 300])).collect());
        let s = build_sample(&flow, &ReprConfig::default()).unwrap();
        assert_eq!(s.bytes().len(), 1600);
        assert_eq!(s.n_strides(), 400);
        assert_eq!(s.label, Some(3));
    }

    #[test]
    fn single_packet_is_padded() {
        let spec = FrameSpec::tcp([1, 2, 3, 4], [5, 6, 7, 8], 10, 20);
        let frame = spec.build(&[0x77; 500]);
        let s = build_sample(&flow_of(vec![frame.clone()]), &ReprConfig::default()).unwrap();
        assert!(s.strides().skip(80).all(|st| st.iter().all(|&b| b == 0)));
        let ip = &frame[14..];
        let (h, _) = split_header_payload(ip).unwrap();
        assert_eq!(&s.bytes()[20..h.len()], &ip[20..h.len()]);
        assert!(s.bytes()[12..20].iter().all(|&b| b == 0));
        assert!(s.bytes()[80..320].iter().all(|&b| b == 0x77));
    }

    #[test]
    fn stride_indexing() {
        let bytes: Vec<u8> = (0..1600).map(|i| (i % 256) as u8).collect();
        let s = StrideSample::new(bytes, 4, FiveTuple::default(), None).unwrap();
        assert_eq!(s.stride(1), &[4, 5, 6, 7]);
    }

    #[test]
    fn empty_flow_rejected() {
        let arp = crate::repr::craft::ethernet(0x0806, &[], &[0; 28]);
        assert!(matches!(
            build_sample(&flow_of(vec![arp]), &ReprConfig::default()),
            Err(Error::EmptyFlow)
        ));
    }

    #[test]
    fn patch_layout_is_a_permutation() {
        let perm = TokenLayout::Patch.permutation(1600, 4).unwrap();
        let mut sorted = perm.clone();
        sorted.sort();
        assert_eq!(sorted, (0..1600).collect::<Vec<_>>());
        // First patch covers rows 0-1, columns 0-1 of the 40x40 square.
        assert_eq!(&perm[..4], &[0, 1, 40, 41]);
        assert_eq!(&perm[4..8], &[2, 3, 42, 43]);
        assert!(TokenLayout::Patch.check(1500, 4).is_err());
        assert_eq!(
            TokenLayout::Stride.apply(&[1, 2, 3], 1).unwrap(),
            vec![1, 2, 3]
        );
    }
}
