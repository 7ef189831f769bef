//! Packet captures to fixed-length stride samples.
//!
//! Pipeline per capture: parse records, strip the link layer, drop non-IP
//! (and optionally DHCP) traffic, group into bidirectional flows, then for
//! each flow crop/pad the first M packets, concatenate and cut into strides.

pub mod config;
pub mod craft;
pub mod dataset;
pub mod flow;
pub mod format;
pub mod packet;
pub mod pcap;
pub mod sample;


pub use config::ReprConfig;
pub use dataset::{balance_dataset, split_dataset, Split};
pub use flow::{assemble_flows, AssemblySummary, FiveTuple, FlowRecord};
pub use format::{Manifest, StrideFile, StrideHeader, StrideRecord};
pub use packet::{anonymize, classify_and_strip, crop_pad, split_header_payload};
pub use pcap::{
    encode_capture, parse_capture, parse_capture_bytes, write_capture, RawPacket, Timestamp,
};
pub use sample::{build_sample, StrideSample, TokenLayout};

/// Samples of one capture plus what was discarded on the way.
#[derive(Clone, Debug, Default)]
pub struct CaptureSamples {
    pub samples: Vec<StrideSample>,
    pub packets: AssemblySummary,
    pub flows_seen: usize,
    pub flows_too_short: usize,
}

/// Run the flow pipeline over already-parsed packets.
pub fn samples_from_packets(
    packets: &[RawPacket],
    cfg: &ReprConfig,
    label: Option<u32>,
) -> crate::Result<CaptureSamples> {
    cfg.validate()?;
    let (flows, summary) = assemble_flows(packets, cfg);
    let mut out = CaptureSamples {
        packets: summary,
        flows_seen: flows.len(),
        ..Default::default()
    };
    for mut flow in flows {
        flow.label = label;
        if sample::flow_packet_rows(&flow, cfg).len() < cfg.min_packets.max(1) {
            out.flows_too_short += 1;
            continue;
        }
        out.samples.push(build_sample(&flow, cfg)?);
    }
    Ok(out)
}
