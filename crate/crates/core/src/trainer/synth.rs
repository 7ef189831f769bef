//! Seeded synthetic traffic. Each class has fixed header fields (server
//! port, TTL, TCP window, option length); addresses, client ports, sequence
//! numbers, packet counts, payload lengths and payload bytes are random.
//! Flows are real Ethernet/IPv4/TCP frames and go through the normal
//! representation pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::repr::craft::FrameSpec;
use crate::repr::{samples_from_packets, RawPacket, ReprConfig, StrideRecord, Timestamp};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub seed: u64,
    pub repr: ReprConfig,
}

/// Header fields shared by every flow of class `c`.
pub fn class_signature(c: usize) -> FrameSpec {
    let mut spec = FrameSpec::tcp([0, 0, 0, 0], [0, 0, 0, 0], 0, (1000 + 37 * c) as u16);
    spec.ttl = (40 + 9 * c % 200) as u8;
    spec.window = (512 * (c + 1) % 65536) as u16;
    spec.tcp_options = vec![1; (c % 4) * 4];
    spec
}

/// One client/server conversation of class `c`, alternating directions.
pub fn synth_flow<R: Rng + ?Sized>(
    c: usize,
    repr: &ReprConfig,
    start: u32,
    rng: &mut R,
) -> Vec<RawPacket> {
    let mut client = class_signature(c);
    client.src = [10, rng.gen(), rng.gen(), rng.gen::<u8>().max(1)];
    client.dst = [172, 16, rng.gen(), rng.gen::<u8>().max(1)];
    client.sport = rng.gen_range(20_000..60_000);
    let server = client.reversed();
    let n_packets = rng.gen_range(2..=repr.packets + 1);
    let max_payload = (repr.payload_bytes * 3 / 2).max(1);
    let mut seq = [rng.gen::<u32>(), rng.gen::<u32>()];
    (0..n_packets)
        .map(|i| {
            let dir = i % 2;
            let len = rng.gen_range(0..=max_payload);
            let payload: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            let spec = if dir == 0 { &client } else { &server };
            let frame = spec.build_seq(seq[dir], &payload);
            seq[dir] = seq[dir].wrapping_add(len as u32);
            RawPacket {
                timestamp: Timestamp::new(start, i as u32 * 1000),
                orig_len: frame.len() as u32,
                link_bytes: frame,
            }
        })
        .collect()
}

/// Per-class packet captures: `captures[c][i]` is flow `i` of class `c`.
pub fn synth_captures(cfg: &SynthConfig) -> Vec<Vec<Vec<RawPacket>>> {
    (0..cfg.classes)
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(c as u64);
            (0..cfg.per_class)
                .map(|i| synth_flow(c, &cfg.repr, i as u32, &mut rng))
                .collect()
        })
        .collect()
}

/// Labeled samples in class-major order.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<StrideRecord>> {
    if cfg.classes == 0 || cfg.per_class == 0 {
        return Err(Error::Config(
            "synthetic dataset needs classes and samples".into(),
        ));
    }
    let mut out = Vec::with_capacity(cfg.classes * cfg.per_class);
    for (c, flows) in synth_captures(cfg).into_iter().enumerate() {
        for packets in flows {
            let got = samples_from_packets(&packets, &cfg.repr, Some(c as u32))?;
            for s in got.samples {
                out.push(StrideRecord {
                    label: s.label,
                    bytes: s.into_bytes(),
                });
            }
        }
    }
    Ok(out)
}
