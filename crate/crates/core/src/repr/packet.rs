//! Link-layer stripping, address anonymization and header/payload split.

use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use super::config::ReprConfig;
use super::pcap::RawPacket;
use crate::error::{Error, Result};

pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const ETHERTYPE_IPV6: u16 = 0x86dd;
pub const ETHERTYPE_ARP: u16 = 0x0806;
pub const ETHERTYPE_VLAN: u16 = 0x8100;
pub const ETHERTYPE_QINQ: u16 = 0x88a8;

pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

const ETH_HEADER_LEN: usize = 14;
const VLAN_TAG_LEN: usize = 4;
const DHCP_PORTS: [u16; 4] = [67, 68, 546, 547];

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedPacket(msg.into())
}

fn be16(b: &[u8], off: usize) -> u16 {
    u16::from_be_bytes([b[off], b[off + 1]])
}

/// Fields of an IP datagram needed for flow keys and cropping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IpInfo {
    pub src: IpAddr,
    pub dst: IpAddr,
    /// Upper-layer protocol after any IPv6 extension headers.
    pub protocol: u8,
    /// IP header length including options or extension headers.
    pub ip_header_len: usize,
    /// Transport header length, zero when absent or unknown.
    pub transport_header_len: usize,
    pub src_port: u16,
    pub dst_port: u16,
}

impl IpInfo {
    pub fn header_len(&self) -> usize {
        self.ip_header_len + self.transport_header_len
    }
}

fn is_ipv6_extension(next: u8) -> bool {
    matches!(next, 0 | 43 | 44 | 51 | 60 | 135 | 139 | 140 | 253 | 254)
}

/// Decode the IP and transport headers of `ip`.
pub fn parse_ip(ip: &[u8]) -> Result<IpInfo> {
    let version = ip.first().map(|b| b >> 4);
    let (src, dst, protocol, ip_header_len, first_fragment) = match version {
        Some(4) => {
            if ip.len() < 20 {
                return Err(malformed(format!(
                    "IPv4 header needs 20 bytes, got {}",
                    ip.len()
                )));
            }
            let ihl = (ip[0] & 0x0f) as usize * 4;
            if ihl < 20 || ihl > ip.len() {
                return Err(malformed(format!(
                    "IPv4 header length {ihl} invalid for {}-byte packet",
                    ip.len()
                )));
            }
            let frag_offset = be16(ip, 6) & 0x1fff;
            let src = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
            let dst = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);
            (
                IpAddr::V4(src),
                IpAddr::V4(dst),
                ip[9],
                ihl,
                frag_offset == 0,
            )
        }
        Some(6) => {
            if ip.len() < 40 {
                return Err(malformed(format!(
                    "IPv6 header needs 40 bytes, got {}",
                    ip.len()
                )));
            }
            let mut a = [0u8; 16];
            a.copy_from_slice(&ip[8..24]);
            let src = Ipv6Addr::from(a);
            a.copy_from_slice(&ip[24..40]);
            let dst = Ipv6Addr::from(a);
            let mut next = ip[6];
            let mut off = 40;
            let mut first_fragment = true;
            while is_ipv6_extension(next) {
                if off + 8 > ip.len() {
                    return Err(malformed(format!(
                        "IPv6 extension header at {off} exceeds {}-byte packet",
                        ip.len()
                    )));
                }
                let len = match next {
                    44 => {
                        first_fragment = be16(ip, off + 2) & 0xfff8 == 0;
                        8
                    }
                    51 => (ip[off + 1] as usize + 2) * 4,
                    _ => (ip[off + 1] as usize + 1) * 8,
                };
                next = ip[off];
                off += len;
                if off > ip.len() {
                    return Err(malformed(format!(
                        "IPv6 extension headers ({off} bytes) exceed {}-byte packet",
                        ip.len()
                    )));
                }
            }
            (IpAddr::V6(src), IpAddr::V6(dst), next, off, first_fragment)
        }
        Some(v) => return Err(malformed(format!("IP version {v}"))),
        None => return Err(malformed("empty IP datagram")),
    };

    let rest = &ip[ip_header_len..];
    let (transport_header_len, src_port, dst_port) = match protocol {
        PROTO_TCP if first_fragment => {
            if rest.len() < 20 {
                return Err(malformed(format!(
                    "TCP header needs 20 bytes, got {}",
                    rest.len()
                )));
            }
            let doff = (rest[12] >> 4) as usize * 4;
            if doff < 20 || doff > rest.len() {
                return Err(malformed(format!(
                    "TCP data offset {doff} invalid for {} remaining bytes",
                    rest.len()
                )));
            }
            (doff, be16(rest, 0), be16(rest, 2))
        }
        PROTO_UDP if first_fragment => {
            if rest.len() < 8 {
                return Err(malformed(format!(
                    "UDP header needs 8 bytes, got {}",
                    rest.len()
                )));
            }
            (8, be16(rest, 0), be16(rest, 2))
        }
        _ => (0, 0, 0),
    };
    Ok(IpInfo {
        src,
        dst,
        protocol,
        ip_header_len,
        transport_header_len,
        src_port,
        dst_port,
    })
}

/// Trim link-layer padding using the length declared by the IP header.
fn trim_to_declared(ip: &[u8]) -> &[u8] {
    let declared = match ip.first().map(|b| b >> 4) {
        Some(4) if ip.len() >= 4 => be16(ip, 2) as usize,
        Some(6) if ip.len() >= 6 => match be16(ip, 4) {
            0 => ip.len(),
            n => 40 + n as usize,
        },
        _ => ip.len(),
    };
    if declared >= 20 && declared < ip.len() {
        &ip[..declared]
    } else {
        ip
    }
}

/// Remove the Ethernet header and VLAN tags. `None` for non-IP frames and,
/// with `drop_dhcp`, for DHCP traffic.
pub fn classify_and_strip(p: &RawPacket, cfg: &ReprConfig) -> Result<Option<Vec<u8>>> {
    let b = &p.link_bytes;
    if b.len() < ETH_HEADER_LEN {
        return Err(malformed(format!(
            "frame of {} bytes is shorter than an Ethernet header",
            b.len()
        )));
    }
    let mut ethertype = be16(b, 12);
    let mut off = ETH_HEADER_LEN;
    while ethertype == ETHERTYPE_VLAN || ethertype == ETHERTYPE_QINQ {
        if b.len() < off + VLAN_TAG_LEN {
            return Err(malformed("truncated VLAN tag"));
        }
        ethertype = be16(b, off + 2);
        off += VLAN_TAG_LEN;
    }
    if ethertype != ETHERTYPE_IPV4 && ethertype != ETHERTYPE_IPV6 {
        return Ok(None);
    }
    let ip = trim_to_declared(&b[off..]);
    if cfg.drop_dhcp {
        let info = parse_ip(ip)?;
        if info.protocol == PROTO_UDP
            && (DHCP_PORTS.contains(&info.src_port) || DHCP_PORTS.contains(&info.dst_port))
        {
            return Ok(None);
        }
    }
    Ok(Some(ip.to_vec()))
}

/// Zero the source and destination address fields when `anonymize_ips` is set.
pub fn anonymize(ip_bytes: &[u8], cfg: &ReprConfig) -> Result<Vec<u8>> {
    let range = match ip_bytes.first().map(|b| b >> 4) {
        Some(4) if ip_bytes.len() >= 20 => 12..20,
        Some(6) if ip_bytes.len() >= 40 => 8..40,
        Some(v @ (4 | 6)) => {
            return Err(malformed(format!(
                "IPv{v} datagram of {} bytes is too short",
                ip_bytes.len()
            )))
        }
        Some(v) => return Err(malformed(format!("IP version {v}"))),
        None => return Err(malformed("empty IP datagram")),
    };
    let mut out = ip_bytes.to_vec();
    if cfg.anonymize_ips {
        out[range].fill(0);
    }
    Ok(out)
}

/// Split at the end of the IP plus TCP/UDP headers.
pub fn split_header_payload(ip_bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    let info = parse_ip(ip_bytes)?;
    Ok(ip_bytes.split_at(info.header_len()))
}

/// Crop or zero-pad header and payload to their configured widths, then concatenate.
pub fn crop_pad(header: &[u8], payload: &[u8], cfg: &ReprConfig) -> Vec<u8> {
    let mut out = vec![0u8; cfg.packet_len()];
    if cfg.include_header {
        let n = header.len().min(cfg.header_bytes);
        out[..n].copy_from_slice(&header[..n]);
    }
    if cfg.include_payload {
        let n = payload.len().min(cfg.payload_bytes);
        out[cfg.header_bytes..cfg.header_bytes + n].copy_from_slice(&payload[..n]);
    }
    out
}

/// Full per-packet pipeline: strip, anonymize, split, crop/pad.
pub fn packet_bytes(ip_bytes: &[u8], cfg: &ReprConfig) -> Result<Vec<u8>> {
    let anon = anonymize(ip_bytes, cfg)?;
    let (h, p) = split_header_payload(&anon)?;
    Ok(crop_pad(h, p, cfg))
}
