use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How packets of a flow are cropped and cut into tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReprConfig {
    /// Packets kept per flow (M).
    pub packets: usize,
    /// Header bytes per packet.
    pub header_bytes: usize,
    /// Payload bytes per packet.
    pub payload_bytes: usize,
    /// Stride length in bytes.
    pub stride_len: usize,
    pub anonymize_ips: bool,
    pub include_header: bool,
    pub include_payload: bool,
    pub drop_dhcp: bool,
    /// Flows with fewer surviving packets are discarded.
    pub min_packets: usize,
}

impl Default for ReprConfig {
    fn default() -> Self {
        Self {
            packets: 5,
            header_bytes: 80,
            payload_bytes: 240,
            stride_len: 4,
            anonymize_ips: true,
            include_header: true,
            include_payload: true,
            drop_dhcp: true,
            min_packets: 1,
        }
    }
}

impl ReprConfig {
    pub fn packet_len(&self) -> usize {
        self.header_bytes + self.payload_bytes
    }

    /// Flow array length: packets × (header + payload).
    pub fn flow_len(&self) -> usize {
        self.packets * self.packet_len()
    }

    /// Strides per flow.
    pub fn n_strides(&self) -> usize {
        self.flow_len() / self.stride_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.packets == 0 {
            return Err(Error::Config("packets per flow must be at least 1".into()));
        }
        if self.packet_len() == 0 {
            return Err(Error::Config(
                "header_bytes + payload_bytes must be at least 1".into(),
            ));
        }
        if self.stride_len == 0 || !self.flow_len().is_multiple_of(self.stride_len) {
            return Err(Error::Config(format!(
                "flow length {} is not divisible by stride length {}",
                self.flow_len(),
                self.stride_len
            )));
        }
        Ok(())
    }
}
