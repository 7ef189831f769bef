//! Builders for well-formed Ethernet/IP/TCP/UDP frames.

use super::packet::{ETHERTYPE_IPV4, ETHERTYPE_VLAN, PROTO_TCP, PROTO_UDP};

const SRC_MAC: [u8; 6] = [0x02, 0, 0, 0, 0, 0x01];
const DST_MAC: [u8; 6] = [0x02, 0, 0, 0, 0, 0x02];

fn checksum(bytes: &[u8]) -> u16 {
    let mut sum: u32 = bytes
        .chunks(2)
        .map(|c| u16::from_be_bytes([c[0], *c.get(1).unwrap_or(&0)]) as u32)
        .sum();
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Ethernet II frame, with one 802.1Q tag per entry of `vlans`.
pub fn ethernet(ethertype: u16, vlans: &[u16], payload: &[u8]) -> Vec<u8> {
    let mut f = Vec::with_capacity(14 + 4 * vlans.len() + payload.len());
    f.extend_from_slice(&DST_MAC);
    f.extend_from_slice(&SRC_MAC);
    for &vid in vlans {
        f.extend_from_slice(&ETHERTYPE_VLAN.to_be_bytes());
        f.extend_from_slice(&(vid & 0x0fff).to_be_bytes());
    }
    f.extend_from_slice(&ethertype.to_be_bytes());
    f.extend_from_slice(payload);
    f
}

/// IPv4 datagram; `options` must be a multiple of 4 bytes.
pub fn ipv4(
    src: [u8; 4],
    dst: [u8; 4],
    protocol: u8,
    ttl: u8,
    options: &[u8],
    payload: &[u8],
) -> Vec<u8> {
    assert!(
        options.len().is_multiple_of(4) && options.len() <= 40,
        "bad IPv4 options length"
    );
    let ihl = 20 + options.len();
    let total = (ihl + payload.len()) as u16;
    let mut h = vec![0x40 | (ihl / 4) as u8, 0];
    h.extend_from_slice(&total.to_be_bytes());
    h.extend_from_slice(&[0x12, 0x34, 0x40, 0x00, ttl, protocol, 0, 0]);
    h.extend_from_slice(&src);
    h.extend_from_slice(&dst);
    h.extend_from_slice(options);
    let c = checksum(&h);
    h[10..12].copy_from_slice(&c.to_be_bytes());
    h.extend_from_slice(payload);
    h
}

pub fn ipv6(src: [u8; 16], dst: [u8; 16], next_header: u8, payload: &[u8]) -> Vec<u8> {
    let mut h = vec![0x60, 0, 0, 0];
    h.extend_from_slice(&(payload.len() as u16).to_be_bytes());
    h.extend_from_slice(&[next_header, 64]);
    h.extend_from_slice(&src);
    h.extend_from_slice(&dst);
    h.extend_from_slice(payload);
    h
}

/// TCP segment with ACK|PSH set; `options` must be a multiple of 4 bytes.
pub fn tcp(sport: u16, dport: u16, seq: u32, options: &[u8], payload: &[u8]) -> Vec<u8> {
    tcp_with_window(sport, dport, seq, 0xffff, options, payload)
}

pub fn tcp_with_window(
    sport: u16,
    dport: u16,
    seq: u32,
    window: u16,
    options: &[u8],
    payload: &[u8],
) -> Vec<u8> {
    assert!(
        options.len().is_multiple_of(4) && options.len() <= 40,
        "bad TCP options length"
    );
    let doff = 20 + options.len();
    let mut s = Vec::with_capacity(doff + payload.len());
    s.extend_from_slice(&sport.to_be_bytes());
    s.extend_from_slice(&dport.to_be_bytes());
    s.extend_from_slice(&seq.to_be_bytes());
    s.extend_from_slice(&0u32.to_be_bytes());
    s.extend_from_slice(&[((doff / 4) as u8) << 4, 0x18]);
    s.extend_from_slice(&window.to_be_bytes());
    s.extend_from_slice(&[0, 0, 0, 0]);
    s.extend_from_slice(options);
    s.extend_from_slice(payload);
    s
}

pub fn udp(sport: u16, dport: u16, payload: &[u8]) -> Vec<u8> {
    let mut s = Vec::with_capacity(8 + payload.len());
    s.extend_from_slice(&sport.to_be_bytes());
    s.extend_from_slice(&dport.to_be_bytes());
    s.extend_from_slice(&((8 + payload.len()) as u16).to_be_bytes());
    s.extend_from_slice(&[0, 0]);
    s.extend_from_slice(payload);
    s
}

/// Header fields of one direction of an IPv4 conversation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameSpec {
    pub src: [u8; 4],
    pub dst: [u8; 4],
    pub sport: u16,
    pub dport: u16,
    pub protocol: u8,
    pub ttl: u8,
    pub window: u16,
    pub tcp_options: Vec<u8>,
    pub vlan: Option<u16>,
}

impl FrameSpec {
    pub fn tcp(src: [u8; 4], dst: [u8; 4], sport: u16, dport: u16) -> Self {
        Self {
            src,
            dst,
            sport,
            dport,
            protocol: PROTO_TCP,
            ttl: 64,
            window: 0xffff,
            tcp_options: Vec::new(),
            vlan: None,
        }
    }

    pub fn udp(src: [u8; 4], dst: [u8; 4], sport: u16, dport: u16) -> Self {
        Self {
            protocol: PROTO_UDP,
            ..Self::tcp(src, dst, sport, dport)
        }
    }

    /// The same conversation seen in the opposite direction.
    pub fn reversed(&self) -> Self {
        Self {
            src: self.dst,
            dst: self.src,
            sport: self.dport,
            dport: self.sport,
            ..self.clone()
        }
    }

    pub fn build(&self, payload: &[u8]) -> Vec<u8> {
        self.build_seq(0, payload)
    }

    pub fn build_seq(&self, seq: u32, payload: &[u8]) -> Vec<u8> {
        let l4 = if self.protocol == PROTO_TCP {
            tcp_with_window(
                self.sport,
                self.dport,
                seq,
                self.window,
                &self.tcp_options,
                payload,
            )
        } else {
            udp(self.sport, self.dport, payload)
        };
        let ip = ipv4(self.src, self.dst, self.protocol, self.ttl, &[], &l4);
        let vlans: Vec<u16> = self.vlan.into_iter().collect();
        ethernet(ETHERTYPE_IPV4, &vlans, &ip)
    }
}
