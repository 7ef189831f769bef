use std::collections::HashMap;
use std::net::{IpAddr, Ipv4Addr};

use serde::{Deserialize, Serialize};

use super::config::ReprConfig;
use super::packet::{classify_and_strip, parse_ip, IpInfo};
use super::pcap::RawPacket;
use crate::error::Result;

/// Conversation key; both directions map to the same value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FiveTuple {
    pub ip_a: IpAddr,
    pub ip_b: IpAddr,
    pub port_a: u16,
    pub port_b: u16,
    pub protocol: u8,
}

impl Default for FiveTuple {
    fn default() -> Self {
        Self::new(
            IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            0,
            IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            0,
            0,
        )
    }
}

impl FiveTuple {
    /// Canonical key with `(ip_a, port_a) <= (ip_b, port_b)`.
    pub fn new(src: IpAddr, sport: u16, dst: IpAddr, dport: u16, protocol: u8) -> Self {
        let (a, b) = if (src, sport) <= (dst, dport) {
            ((src, sport), (dst, dport))
        } else {
            ((dst, dport), (src, sport))
        };
        Self {
            ip_a: a.0,
            ip_b: b.0,
            port_a: a.1,
            port_b: b.1,
            protocol,
        }
    }

    pub fn from_info(info: &IpInfo) -> Self {
        Self::new(
            info.src,
            info.src_port,
            info.dst,
            info.dst_port,
            info.protocol,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlowRecord {
    pub key: FiveTuple,
    /// Time-ordered; capture order on ties.
    pub packets: Vec<RawPacket>,
    pub label: Option<u32>,
}

/// Per-run packet counters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssemblySummary {
    pub packets_seen: usize,
    pub packets_kept: usize,
    pub non_ip_dropped: usize,
    pub malformed: usize,
}

impl AssemblySummary {
    pub fn merge(&mut self, other: &AssemblySummary) {
        self.packets_seen += other.packets_seen;
        self.packets_kept += other.packets_kept;
        self.non_ip_dropped += other.non_ip_dropped;
        self.malformed += other.malformed;
    }
}

/// Canonical key of a packet, `None` if it is filtered out.
pub fn flow_key(p: &RawPacket, cfg: &ReprConfig) -> Result<Option<FiveTuple>> {
    match classify_and_strip(p, cfg)? {
        Some(ip) => Ok(Some(FiveTuple::from_info(&parse_ip(&ip)?))),
        None => Ok(None),
    }
}

/// Group IP packets by canonical 5-tuple. Flows appear in first-seen order;
/// malformed packets are counted and skipped.
pub fn assemble_flows(
    packets: &[RawPacket],
    cfg: &ReprConfig,
) -> (Vec<FlowRecord>, AssemblySummary) {
    let mut summary = AssemblySummary {
        packets_seen: packets.len(),
        ..Default::default()
    };
    let mut index: HashMap<FiveTuple, usize> = HashMap::new();
    let mut flows: Vec<FlowRecord> = Vec::new();
    for p in packets {
        match flow_key(p, cfg) {
            Ok(Some(key)) => {
                summary.packets_kept += 1;
                let i = *index.entry(key).or_insert_with(|| {
                    flows.push(FlowRecord {
                        key,
                        packets: Vec::new(),
                        label: None,
                    });
                    flows.len() - 1
                });
                flows[i].packets.push(p.clone());
            }
            Ok(None) => summary.non_ip_dropped += 1,
            Err(e) => {
                log::debug!("skipping packet: {e}");
                summary.malformed += 1;
            }
        }
    }
    for f in &mut flows {
        f.packets.sort_by_key(|p| p.timestamp);
    }
    (flows, summary)
}
