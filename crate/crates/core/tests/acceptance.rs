//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line and
//! then asserts, so `cargo test --test acceptance -- --nocapture` doubles as
//! a report. Timing-sensitive checks hold a shared lock so they never
//! overlap.

use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

use netmamba_core::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use netmamba_core::model::{
    count_parameters, make_mask, visible_len, Checkpoint, Mode, ModelConfig, NetMamba,
};
use netmamba_core::repr::craft::{ethernet, ipv4, tcp, udp};
use netmamba_core::repr::{
    encode_capture, parse_capture_bytes, samples_from_packets, split_dataset, RawPacket,
    ReprConfig, StrideFile, StrideHeader, StrideRecord, Timestamp,
};
use netmamba_core::ssm::{
    discretize, selective_scan, ssm_conv_oracle, BlockConfig, MambaBlock, MambaStack, NormKind,
};
use netmamba_core::trainer::{
    evaluate, finetune, length_scaling, predict, pretrain, resume, synth_dataset,
    training_checkpoint, BenchOptions, FinetuneOptions, MetricsReport, OptimState, PretrainOptions,
    SynthConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u32, what: &str, pass: bool, detail: String) {
    println!(
        "[c{id:02}] {what}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {id} failed: {what}: {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// 1. scan against the convolutional form and a direct quadratic sum

/// Time-invariant discretized parameters tiled along the length axis.
fn invariant(b: usize, l: usize, e: usize, n: usize, r: &mut ChaCha8Rng) -> [Tensor<f64>; 4] {
    let delta0 = Tensor::<f64>::uniform(&[b, 1, e], 0.01, 1.0, r);
    let a = Tensor::<f64>::uniform(&[e, n], -3.0, -0.05, r);
    let b0 = Tensor::<f64>::uniform(&[b, 1, n], -1.0, 1.0, r);
    let c0 = Tensor::<f64>::uniform(&[b, 1, n], -1.0, 1.0, r);
    let tile = |t: &Tensor<f64>, w: usize| {
        let mut d = Vec::with_capacity(b * l * w);
        for bi in 0..b {
            for _ in 0..l {
                d.extend_from_slice(&t.data()[bi * w..(bi + 1) * w]);
            }
        }
        Tensor::new(&[b, l, w], d).unwrap()
    };
    let (delta, bm, cm) = (tile(&delta0, e), tile(&b0, n), tile(&c0, n));
    let (abar, bbar) = discretize(&delta, &a, &bm).unwrap();
    let x = Tensor::<f64>::uniform(&[b, l, e], -1.0, 1.0, r);
    [abar, bbar, cm, x]
}

/// `y_t = Σ_{k≤t} C Ā^{t-k} B̄ x_k`, computed term by term.
fn quadratic_sum(
    abar: &Tensor<f64>,
    bbar: &Tensor<f64>,
    c: &Tensor<f64>,
    x: &Tensor<f64>,
) -> Vec<f64> {
    let (b, l, e) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = abar.shape()[3];
    let mut y = vec![0.0; b * l * e];
    for bi in 0..b {
        for ch in 0..e {
            for t in 0..l {
                let mut acc = 0.0;
                for k in 0..=t {
                    for s in 0..n {
                        let a = abar.at(&[bi, 0, ch, s]);
                        let term =
                            c.at(&[bi, 0, s]) * a.powi((t - k) as i32) * bbar.at(&[bi, 0, ch, s]);
                        acc += term * x.at(&[bi, k, ch]);
                    }
                }
                y[(bi * l + t) * e + ch] = acc;
            }
        }
    }
    y
}

#[test]
fn c01_scan_matches_convolution_and_quadratic_sum() {
    let _g = serial();
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (b, l, e, n) = (
            r.gen_range(1..=3),
            r.gen_range(1..=48),
            r.gen_range(1..=6),
            r.gen_range(1..=8),
        );
        let [abar, bbar, c, x] = invariant(b, l, e, n, &mut r);
        let rec = selective_scan(&abar, &bbar, &c, &x).unwrap();
        let conv = ssm_conv_oracle(&abar, &bbar, &c, &x).unwrap();
        let quad = quadratic_sum(&abar, &bbar, &c, &x);
        worst = worst.max(rec.max_abs_diff(&conv));
        for (u, v) in rec.data().iter().zip(&quad) {
            worst = worst.max((u - v).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        1,
        "scan = convolution = quadratic sum on 50 instances",
        worst < 1e-10 && secs < 5.0,
        format!("max abs err {worst:.2e}, {secs:.2}s"),
    );
}

// ---------------------------------------------------------------------------
// 2. finite-difference gradient checks

const H: f64 = 1e-4;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-8)
}

/// Projects an output onto fixed weights so every element matters.
fn project(g: &mut Graph<f64>, out: Var) -> Var {
    let w = Tensor::uniform(g.shape(out), -1.0, 1.0, &mut rng(7));
    let w = g.constant(w);
    let p = g.mul(out, w).unwrap();
    g.sum_all(p)
}

type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

fn primitive_check(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars);
        let loss = project(&mut g, out);
        (g, vars, loss)
    };
    let value = |ins: &[Tensor<f64>]| {
        let (g, _, loss) = eval(ins);
        g.value(loss).item()
    };
    let (g, vars, loss) = eval(inputs);
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.numel() {
            let mut p = inputs.to_vec();
            p[k].data_mut()[i] += H;
            let mut m = inputs.to_vec();
            m[k].data_mut()[i] -= H;
            worst = worst.max(rel_err(
                analytic.data()[i],
                (value(&p) - value(&m)) / (2.0 * H),
            ));
        }
    }
    worst
}

fn u(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

#[test]
fn c02_gradient_checks() {
    let _g = serial();
    let start = Instant::now();
    let mut positive = u(&[2, 5, 3], 20);
    positive
        .data_mut()
        .iter_mut()
        .for_each(|d| *d = 0.1 + d.abs());
    let target = u(&[3, 5], 21);
    let mask: Vec<bool> = (0..15).map(|i| i % 4 != 1).collect();
    let cases: Vec<(&str, Vec<Tensor<f64>>, Box<Build>)> = vec![
        (
            "matmul",
            vec![u(&[2, 3, 4], 1), u(&[4, 5], 2)],
            Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()),
        ),
        (
            "add",
            vec![u(&[2, 3, 4], 1), u(&[3, 4], 2)],
            Box::new(|g, v| g.add(v[0], v[1]).unwrap()),
        ),
        (
            "mul",
            vec![u(&[2, 3], 3), u(&[3], 4)],
            Box::new(|g, v| g.mul(v[0], v[1]).unwrap()),
        ),
        (
            "scale",
            vec![u(&[3, 4], 5)],
            Box::new(|g, v| g.scale(v[0], -0.7)),
        ),
        ("neg", vec![u(&[3, 4], 5)], Box::new(|g, v| g.neg(v[0]))),
        ("exp", vec![u(&[3, 4], 5)], Box::new(|g, v| g.exp(v[0]))),
        ("silu", vec![u(&[3, 4], 5)], Box::new(|g, v| g.silu(v[0]))),
        (
            "softplus",
            vec![u(&[3, 4], 5)],
            Box::new(|g, v| g.softplus(v[0])),
        ),
        (
            "rmsnorm",
            vec![u(&[2, 3, 5], 6), u(&[5], 7)],
            Box::new(|g, v| g.rmsnorm(v[0], v[1], 1e-5).unwrap()),
        ),
        (
            "layernorm",
            vec![u(&[2, 3, 5], 6), u(&[5], 7), u(&[5], 8)],
            Box::new(|g, v| g.layernorm(v[0], v[1], v[2], 1e-5).unwrap()),
        ),
        (
            "causal_conv1d",
            vec![u(&[2, 6, 3], 9), u(&[3, 4], 10), u(&[3], 11)],
            Box::new(|g, v| g.causal_conv1d(v[0], v[1], v[2]).unwrap()),
        ),
        (
            "reshape",
            vec![u(&[2, 4, 3], 12)],
            Box::new(|g, v| g.reshape(v[0], &[8, 3]).unwrap()),
        ),
        (
            "slice",
            vec![u(&[2, 4, 3], 12)],
            Box::new(|g, v| g.slice(v[0], 1, 1, 3).unwrap()),
        ),
        (
            "concat",
            vec![u(&[2, 4, 3], 12), u(&[2, 2, 3], 13)],
            Box::new(|g, v| g.concat(&[v[0], v[1]], 1).unwrap()),
        ),
        (
            "permute",
            vec![u(&[2, 4, 3], 12)],
            Box::new(|g, v| g.permute(v[0], &[2, 0, 1]).unwrap()),
        ),
        (
            "gather_rows",
            vec![u(&[2, 4, 3], 12)],
            Box::new(|g, v| g.gather_rows(v[0], &[3, 0, 0, 2, 1, 3]).unwrap()),
        ),
        (
            "broadcast_leading",
            vec![u(&[2, 3], 14)],
            Box::new(|g, v| g.broadcast_leading(v[0], &[4]).unwrap()),
        ),
        (
            "sum",
            vec![u(&[2, 4, 3], 15)],
            Box::new(|g, v| g.sum(v[0], 1).unwrap()),
        ),
        (
            "mean",
            vec![u(&[2, 4, 3], 15)],
            Box::new(|g, v| g.mean(v[0], 2).unwrap()),
        ),
        (
            "sum_all",
            vec![u(&[2, 4, 3], 15)],
            Box::new(|g, v| g.sum_all(v[0])),
        ),
        (
            "mean_all",
            vec![u(&[2, 4, 3], 15)],
            Box::new(|g, v| g.mean_all(v[0])),
        ),
        (
            "softmax_cross_entropy",
            vec![u(&[3, 5], 16)],
            Box::new(|g, v| g.softmax_cross_entropy(v[0], &[0, 4, 2]).unwrap()),
        ),
        (
            "mse",
            vec![u(&[3, 5], 17)],
            Box::new(move |g, v| g.mse(v[0], &target, Some(&mask)).unwrap()),
        ),
        (
            "selective_scan",
            vec![
                u(&[2, 5, 3], 18),
                positive,
                u(&[3, 4], 19),
                u(&[2, 5, 4], 22),
                u(&[2, 5, 4], 23),
            ],
            Box::new(|g, v| g.selective_scan(v[0], v[1], v[2], v[3], v[4]).unwrap()),
        ),
    ];
    let mut worst_prim = (0.0f64, "");
    for (name, ins, build) in &cases {
        let e = primitive_check(ins, build.as_ref());
        if e > worst_prim.0 || worst_prim.1.is_empty() {
            worst_prim = (
                e.max(worst_prim.0),
                if e >= worst_prim.0 {
                    name
                } else {
                    worst_prim.1
                },
            );
        }
    }

    // Whole block: input and every parameter.
    let cfg = BlockConfig {
        d_model: 8,
        d_inner: 16,
        d_state: 4,
        dt_rank: 4,
        conv_width: 4,
        norm: NormKind::Rms,
        ssm_skip: false,
        eps: 1e-5,
    };
    let mut store = ParamStore::<f64>::new();
    let block = MambaBlock::new(&mut store, "b", 0, cfg, &mut rng(30)).unwrap();
    // Step sizes of order one, so the transition matrix has gradients well
    // above finite-difference round-off.
    store.set_value(block.dt_bias, u(&[16], 32)).unwrap();
    let x = u(&[2, 8, 8], 31);
    let loss_of = |store: &ParamStore<f64>, x: &Tensor<f64>| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = block.forward(&mut g, store, xv).unwrap();
        let l = project(&mut g, y);
        g.value(l).item()
    };
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let y = block.forward(&mut g, &store, xv).unwrap();
    let loss = project(&mut g, y);
    let grads = g.backward(loss).unwrap();
    store.zero_grad();
    g.backward_into(loss, &mut store).unwrap();
    drop(g);
    let mut worst_block: f64 = 0.0;
    let gx = grads.get(xv).unwrap().clone();
    for i in 0..x.numel() {
        let (mut p, mut m) = (x.clone(), x.clone());
        p.data_mut()[i] += H;
        m.data_mut()[i] -= H;
        let numeric = (loss_of(&store, &p) - loss_of(&store, &m)) / (2.0 * H);
        worst_block = worst_block.max(rel_err(gx.data()[i], numeric));
    }
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let mut scalars = 0;
    for id in ids {
        let base = store.value(id).clone();
        let analytic = store.grad(id).clone();
        for i in 0..base.numel() {
            let mut p = base.clone();
            p.data_mut()[i] += H;
            store.set_value(id, p).unwrap();
            let lp = loss_of(&store, &x);
            let mut m = base.clone();
            m.data_mut()[i] -= H;
            store.set_value(id, m).unwrap();
            let lm = loss_of(&store, &x);
            worst_block = worst_block.max(rel_err(analytic.data()[i], (lp - lm) / (2.0 * H)));
            scalars += 1;
        }
        store.set_value(id, base).unwrap();
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        2,
        "finite-difference gradients",
        worst_prim.0 < 1e-6 && worst_block < 1e-3 && secs < 60.0,
        format!(
            "{} primitives, worst {:.2e} ({}); block over {} params + input worst {:.2e}; {secs:.1}s",
            cases.len(),
            worst_prim.0,
            worst_prim.1,
            scalars,
            worst_block
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. causality of a 4-block stack

#[test]
fn c03_encoder_is_causal() {
    let _g = serial();
    let cfg = BlockConfig {
        d_model: 16,
        d_inner: 32,
        d_state: 8,
        dt_rank: 4,
        conv_width: 4,
        norm: NormKind::Rms,
        ssm_skip: false,
        eps: 1e-5,
    };
    let mut store = ParamStore::<f32>::new();
    let stack = MambaStack::new(&mut store, "enc", 4, cfg, &mut rng(40)).unwrap();
    let (b, l, d) = (2, 24, 16);
    let mut r = rng(41);
    let run = |x: &Tensor<f32>| {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let y = stack.forward(&mut g, &store, xv).unwrap();
        g.value(y).clone()
    };
    let mut violations = 0;
    let mut unchanged_at_t = 0;
    for _ in 0..20 {
        let x = Tensor::<f32>::uniform(&[b, l, d], -1.0, 1.0, &mut r);
        let t = r.gen_range(0..l);
        let mut x2 = x.clone();
        for bi in 0..b {
            for k in 0..d {
                x2.data_mut()[(bi * l + t) * d + k] += r.gen_range(0.5..2.0);
            }
        }
        let (y1, y2) = (run(&x), run(&x2));
        for bi in 0..b {
            let lo = bi * l * d;
            let earlier = lo..lo + t * d;
            if y1.data()[earlier.clone()]
                .iter()
                .zip(&y2.data()[earlier])
                .any(|(p, q)| p.to_bits() != q.to_bits())
            {
                violations += 1;
            }
            let row = lo + t * d..lo + (t + 1) * d;
            if y1.data()[row.clone()] == y2.data()[row] {
                unchanged_at_t += 1;
            }
        }
    }
    verdict(
        3,
        "earlier rows bit-identical under later perturbation",
        violations == 0 && unchanged_at_t == 0,
        format!("20 probes, {violations} violations, {unchanged_at_t} rows insensitive to their own input"),
    );
}

// ---------------------------------------------------------------------------
// 4. representation golden output

const IP_A: [u8; 4] = [192, 168, 0, 5];
const IP_B: [u8; 4] = [151, 101, 1, 69];
const IP_C: [u8; 4] = [10, 1, 2, 3];
const IP_D: [u8; 4] = [8, 8, 4, 4];

struct Crafted {
    frame: Vec<u8>,
    /// IP datagram and the length of its IP + transport headers.
    datagram: Option<(Vec<u8>, usize)>,
}

fn tcp_frame(
    src: [u8; 4],
    dst: [u8; 4],
    sp: u16,
    dp: u16,
    seq: u32,
    payload: &[u8],
    vlans: &[u16],
) -> Crafted {
    let d = ipv4(src, dst, 6, 64, &[], &tcp(sp, dp, seq, &[], payload));
    Crafted {
        frame: ethernet(0x0800, vlans, &d),
        datagram: Some((d, 40)),
    }
}

fn udp_frame(src: [u8; 4], dst: [u8; 4], sp: u16, dp: u16, payload: &[u8]) -> Crafted {
    let d = ipv4(src, dst, 17, 128, &[], &udp(sp, dp, payload));
    Crafted {
        frame: ethernet(0x0800, &[], &d),
        datagram: Some((d, 28)),
    }
}

fn arp_frame() -> Crafted {
    let mut body = vec![0, 1, 8, 0, 6, 4, 0, 1];
    body.extend_from_slice(&[2, 0, 0, 0, 0, 1]);
    body.extend_from_slice(&IP_C);
    body.extend_from_slice(&[0; 6]);
    body.extend_from_slice(&IP_D);
    Crafted {
        frame: ethernet(0x0806, &[], &body),
        datagram: None,
    }
}

/// Expected per-packet row: addresses zeroed, headers and payload each
/// cropped or zero-padded to their budget.
fn oracle_row(datagram: &[u8], hdr_len: usize, cfg: &ReprConfig) -> Vec<u8> {
    let mut d = datagram.to_vec();
    d[12..20].fill(0);
    let mut row = vec![0u8; cfg.header_bytes + cfg.payload_bytes];
    let h = hdr_len.min(cfg.header_bytes);
    row[..h].copy_from_slice(&d[..h]);
    let payload = &d[hdr_len..];
    let p = payload.len().min(cfg.payload_bytes);
    row[cfg.header_bytes..cfg.header_bytes + p].copy_from_slice(&payload[..p]);
    row
}

#[test]
fn c04_representation_golden_output() {
    let _g = serial();
    let cfg = ReprConfig::default();
    let long: Vec<u8> = (0..300u32).map(|i| (i * 7 % 251) as u8).collect();
    // Flow 1: IPv4/TCP, 6 packets with one oversized payload (crop to M=5).
    // Flow 2: IPv4/UDP, 2 packets (padding).
    // Flow 3: VLAN-tagged TCP, 3 packets.
    // Flow 4: single UDP packet (short flow).
    // ARP frames are dropped.
    let seq: Vec<(usize, Crafted)> = vec![
        (1, tcp_frame(IP_A, IP_B, 51000, 443, 1, b"", &[])),
        (2, udp_frame(IP_C, IP_D, 5353, 53, b"\x00\x01query")),
        (0, arp_frame()),
        (1, tcp_frame(IP_B, IP_A, 443, 51000, 900, b"", &[])),
        (3, tcp_frame(IP_C, IP_B, 40000, 8080, 5, b"GET /x", &[100])),
        (1, tcp_frame(IP_A, IP_B, 51000, 443, 2, &long, &[])),
        (2, udp_frame(IP_D, IP_C, 53, 5353, b"\x00\x01answer")),
        (1, tcp_frame(IP_B, IP_A, 443, 51000, 901, b"hello", &[])),
        (3, tcp_frame(IP_B, IP_C, 8080, 40000, 77, b"200", &[100])),
        (1, tcp_frame(IP_A, IP_B, 51000, 443, 302, b"a", &[])),
        (4, udp_frame(IP_A, IP_D, 7000, 7001, b"x")),
        (3, tcp_frame(IP_C, IP_B, 40000, 8080, 11, b"", &[100])),
        (1, tcp_frame(IP_B, IP_A, 443, 51000, 906, b"bb", &[])),
        (0, arp_frame()),
        (1, tcp_frame(IP_A, IP_B, 51000, 443, 303, b"ccc", &[])),
    ];
    let packets: Vec<RawPacket> = seq
        .iter()
        .enumerate()
        .map(|(i, (_, c))| RawPacket {
            timestamp: Timestamp::new(1_700_000_000, i as u32 * 1000),
            orig_len: c.frame.len() as u32,
            link_bytes: c.frame.clone(),
        })
        .collect();
    let capture = encode_capture(&packets, 65535);
    let parsed = parse_capture_bytes(&capture).unwrap();
    let got = samples_from_packets(&parsed, &cfg, Some(0)).unwrap();
    let produced = StrideFile {
        header: StrideHeader::from_config(&cfg, 1),
        records: got
            .samples
            .into_iter()
            .map(|s| StrideRecord {
                label: s.label,
                bytes: s.into_bytes(),
            })
            .collect(),
    }
    .encode()
    .unwrap();

    let mut expected = b"NMSTRIDE".to_vec();
    expected.extend_from_slice(&1u16.to_le_bytes());
    for v in [5u32, 80, 240, 4, 1, 4] {
        expected.extend_from_slice(&v.to_le_bytes());
    }
    for flow in 1..=4 {
        expected.extend_from_slice(&0u32.to_le_bytes());
        let mut bytes = Vec::new();
        for (f, c) in &seq {
            if *f == flow && bytes.len() < 5 * 320 {
                let (d, h) = c.datagram.as_ref().unwrap();
                bytes.extend(oracle_row(d, *h, &cfg));
            }
        }
        bytes.resize(1600, 0);
        expected.extend(bytes);
    }

    let model = ModelConfig::default();
    let dims = (
        cfg.flow_len(),
        cfg.n_strides(),
        model.seq_len(),
        model.visible_len(),
    );
    let arp_dropped = got.packets.non_ip_dropped;
    verdict(
        4,
        "golden sample file and default dimensions",
        produced == expected && dims == (1600, 400, 401, 41) && arp_dropped == 2,
        format!(
            "{} bytes, identical: {}, dims {dims:?}, non-IP dropped {arp_dropped}",
            produced.len(),
            produced == expected
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. masking statistics

#[test]
fn c05_mask_statistics() {
    let _g = serial();
    let (seq_len, ratio) = (401, 0.9);
    let mut r = rng(50);
    let mut counts = vec![0usize; 400];
    let mut cls_visible = 0;
    for _ in 0..1000 {
        let plan = make_mask(seq_len, ratio, &mut r);
        if plan.encoder_rows().last() == Some(&400)
            && plan.encoder_rows().len() == visible_len(seq_len, ratio)
        {
            cls_visible += 1;
        }
        for &v in &plan.visible {
            counts[v] += 1;
        }
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / 1000.0).collect();
    let lo = freqs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = freqs.iter().cloned().fold(0.0, f64::max);
    verdict(
        5,
        "class token always visible, strides ~10% visible",
        cls_visible == 1000 && lo >= 0.05 && hi <= 0.15,
        format!("class token {cls_visible}/1000, stride visibility in [{lo:.3}, {hi:.3}]"),
    );
}

// ---------------------------------------------------------------------------
// 6. parameter counts

#[test]
fn c06_parameter_counts() {
    let _g = serial();
    let cfg = ModelConfig {
        classes: 20,
        ..Default::default()
    };
    let (pt, ft) = count_parameters(&cfg);
    let pt_model = NetMamba::<f32>::new(cfg.clone(), Mode::Pretrain, 0)
        .unwrap()
        .store
        .count();
    let ft_model = NetMamba::<f32>::new(cfg, Mode::Finetune, 0)
        .unwrap()
        .store
        .count();
    let pt_ok = (1.87e6..=2.53e6).contains(&(pt as f64));
    let ft_ok = (1.62e6..=2.19e6).contains(&(ft as f64));
    verdict(
        6,
        "default parameter counts",
        pt_ok && ft_ok && pt == pt_model && ft == ft_model,
        format!("pre-train {pt} (built {pt_model}), fine-tune {ft} (built {ft_model})"),
    );
}

// ---------------------------------------------------------------------------
// 7. desk-scale learning

fn desk_repr() -> ReprConfig {
    ReprConfig {
        packets: 4,
        header_bytes: 40,
        payload_bytes: 24,
        stride_len: 4,
        ..Default::default()
    }
}

fn desk_model(classes: usize) -> ModelConfig {
    ModelConfig {
        stride_len: 4,
        n_strides: desk_repr().n_strides(),
        d_enc: 32,
        e_enc: 64,
        depth_enc: 2,
        d_dec: 32,
        e_dec: 64,
        depth_dec: 1,
        d_state: 8,
        dt_rank: 8,
        classes,
        ..Default::default()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn c07_desk_scale_learning() {
    let _g = serial();
    let start = Instant::now();
    let data = synth_dataset(&SynthConfig {
        classes: 10,
        per_class: 200,
        seed: 7,
        repr: desk_repr(),
    })
    .unwrap();

    // (a) pre-training
    let mut pt = NetMamba::<f32>::new(desk_model(10), Mode::Pretrain, 1).unwrap();
    let mut state = OptimState::new(&pt.store);
    let popts = PretrainOptions {
        batch: 32,
        steps: 500,
        lr: 2e-3,
        seed: 1,
        ..Default::default()
    };
    let log = pretrain(&mut pt, &data, &popts, &mut state, |_, _, _| Ok(())).unwrap();
    let losses: Vec<f64> = log.iter().map(|s| s.loss).collect();
    let first = mean(&losses[..20]);
    let last = mean(&losses[losses.len() - 20..]);
    let drop = 1.0 - last / first;
    let t_pre = start.elapsed().as_secs_f64();

    // (b) fine-tuning from the pre-trained encoder
    let split = split_dataset(data, |r| r.label.unwrap(), (0.8, 0.1, 0.1), 3).unwrap();
    let fine = |train: &[StrideRecord], init: bool, target: Option<f64>, batch: usize, lr: f64| {
        let mut m = NetMamba::<f32>::new(desk_model(10), Mode::Finetune, 2).unwrap();
        if init {
            m.copy_shared_from(&pt.store).unwrap();
        }
        let opts = FinetuneOptions {
            batch,
            epochs: 60,
            lr,
            seed: 4,
            target_val_accuracy: target,
            ..Default::default()
        };
        finetune(&mut m, train, &split.val, &split.test, &opts, |_| Ok(())).unwrap()
    };
    let full = fine(&split.train, true, Some(1.0), 32, 2e-3);
    let full_acc = full.test.as_ref().unwrap().accuracy;

    // (c) 10% of the training split, pre-trained vs from scratch
    let few = split_dataset(
        split.train.clone(),
        |r| r.label.unwrap(),
        (0.1, 0.9, 0.0),
        5,
    )
    .unwrap()
    .train;
    let few_pre = fine(&few, true, None, 8, 5e-3).test.unwrap().accuracy;
    let few_scratch = fine(&few, false, None, 8, 5e-3).test.unwrap().accuracy;
    let secs = start.elapsed().as_secs_f64();

    verdict(
        7,
        "desk-scale pre-training and fine-tuning",
        drop >= 0.5 && full_acc >= 0.95 && few_pre >= few_scratch && secs < 900.0,
        format!(
            "masked MSE {first:.4} -> {last:.4} ({:.0}% drop, {t_pre:.0}s); test acc {full_acc:.3} after {} epochs; \
             {} samples: pre-trained {few_pre:.3} vs scratch {few_scratch:.3}; {secs:.0}s total",
            drop * 100.0,
            full.epochs.len(),
            few.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. linear scaling in sequence length

#[test]
fn c08_linear_length_scaling() {
    let _g = serial();
    let base = ModelConfig {
        d_enc: 32,
        e_enc: 64,
        depth_enc: 2,
        d_state: 8,
        dt_rank: 4,
        ..Default::default()
    };
    let opts = BenchOptions {
        warmup: 1,
        runs: 5,
        seed: 0,
    };
    let (k, rows) = length_scaling(&base, 4, &[400, 800, 1600], &opts).unwrap();
    let times: Vec<String> = rows
        .iter()
        .map(|r| format!("{}:{:.1}ms", r.seq_len, r.median_secs * 1e3))
        .collect();
    verdict(
        8,
        "encoder wall-clock linear in length",
        k <= 1.3,
        format!("exponent {k:.3}, {}", times.join(" ")),
    );
}

// ---------------------------------------------------------------------------
// 9. metrics against a per-sample loop

struct Brute {
    accuracy: f64,
    precision: f64,
    recall: f64,
    f1: f64,
}

fn brute_force(labels: &[usize], preds: &[usize], classes: usize) -> Brute {
    let total = labels.len() as f64;
    let correct = labels.iter().zip(preds).filter(|(y, p)| y == p).count();
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let (mut precision, mut recall, mut f1) = (0.0, 0.0, 0.0);
    for k in 0..classes {
        let (mut tp, mut fp, mut fn_, mut support) = (0usize, 0usize, 0usize, 0usize);
        for (&y, &p) in labels.iter().zip(preds) {
            support += (y == k) as usize;
            tp += (y == k && p == k) as usize;
            fp += (y != k && p == k) as usize;
            fn_ += (y == k && p != k) as usize;
        }
        let pr = div(tp as f64, (tp + fp) as f64);
        let rc = div(tp as f64, (tp + fn_) as f64);
        let f = div(2.0 * pr * rc, pr + rc);
        let w = support as f64 / total;
        precision += w * pr;
        recall += w * rc;
        f1 += w * f;
    }
    Brute {
        accuracy: correct as f64 / total,
        precision,
        recall,
        f1,
    }
}

#[test]
fn c09_metrics_match_brute_force() {
    let _g = serial();
    let mut r = rng(90);
    let mut mismatches = 0;
    for _ in 0..100 {
        let c = r.gen_range(2..=8);
        let mut confusion = vec![vec![0usize; c]; c];
        let (mut labels, mut preds) = (Vec::new(), Vec::new());
        for (y, row) in confusion.iter_mut().enumerate() {
            for (p, cell) in row.iter_mut().enumerate() {
                // Some empty rows and columns exercise the 0/0 rule.
                *cell = if r.gen_bool(0.2) {
                    0
                } else {
                    r.gen_range(0..20)
                };
                labels.extend(std::iter::repeat_n(y, *cell));
                preds.extend(std::iter::repeat_n(p, *cell));
            }
        }
        if labels.is_empty() {
            confusion[0][0] = 1;
            labels.push(0);
            preds.push(0);
        }
        let b = brute_force(&labels, &preds, c);
        for m in [
            MetricsReport::from_confusion(confusion.clone()).unwrap(),
            MetricsReport::from_predictions(&labels, &preds, c).unwrap(),
        ] {
            if (m.accuracy, m.precision, m.recall, m.f1)
                != (b.accuracy, b.precision, b.recall, b.f1)
            {
                mismatches += 1;
            }
        }
    }
    verdict(
        9,
        "weighted metrics equal brute force exactly",
        mismatches == 0,
        format!("100 random matrices, {mismatches} mismatches"),
    );
}

// ---------------------------------------------------------------------------
// 10. checkpoint round trip

#[test]
fn c10_checkpoint_round_trip() {
    let _g = serial();
    let repr = ReprConfig {
        packets: 2,
        header_bytes: 40,
        payload_bytes: 8,
        stride_len: 4,
        ..Default::default()
    };
    let data = synth_dataset(&SynthConfig {
        classes: 3,
        per_class: 12,
        seed: 11,
        repr: repr.clone(),
    })
    .unwrap();
    let cfg = ModelConfig {
        n_strides: repr.n_strides(),
        d_enc: 16,
        e_enc: 32,
        depth_enc: 2,
        d_dec: 8,
        e_dec: 16,
        depth_dec: 1,
        d_state: 4,
        dt_rank: 4,
        classes: 3,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();

    // Evaluation of a reloaded fine-tuned model.
    let mut ft = NetMamba::<f32>::new(cfg.clone(), Mode::Finetune, 3).unwrap();
    let opts = FinetuneOptions {
        batch: 8,
        epochs: 2,
        ..Default::default()
    };
    finetune(&mut ft, &data, &data, &[], &opts, |_| Ok(())).unwrap();
    let path = dir.path().join("ft.ckpt");
    Checkpoint::from_model(&ft, 0).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap().to_model().unwrap();
    let logits = |m: &NetMamba<f32>| {
        let flows: Vec<&[u8]> = data.iter().map(|r| r.bytes.as_slice()).collect();
        let x = m.prepare(&flows).unwrap();
        let mut g = Graph::inference();
        let out = m.finetune_forward(&mut g, &x).unwrap();
        g.value(out)
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    let eval_same = logits(&ft) == logits(&loaded)
        && evaluate(&ft, &data, 7).unwrap() == evaluate(&loaded, &data, 7).unwrap()
        && predict(&ft, &data, 5).unwrap() == predict(&loaded, &data, 5).unwrap();

    // Interrupted and resumed pre-training.
    let popts = PretrainOptions {
        batch: 6,
        steps: 10,
        lr: 5e-3,
        seed: 9,
        ..Default::default()
    };
    let mut whole = NetMamba::<f32>::new(cfg.clone(), Mode::Pretrain, 4).unwrap();
    let mut st = OptimState::new(&whole.store);
    let whole_log = pretrain(&mut whole, &data, &popts, &mut st, |_, _, _| Ok(())).unwrap();

    let mut part = NetMamba::<f32>::new(cfg, Mode::Pretrain, 4).unwrap();
    let mut st = OptimState::new(&part.store);
    let first = PretrainOptions {
        stop_at: Some(4),
        ..popts.clone()
    };
    let mut log = pretrain(&mut part, &data, &first, &mut st, |_, _, _| Ok(())).unwrap();
    let path = dir.path().join("pt.ckpt");
    training_checkpoint(&part, &st).save(&path).unwrap();
    drop(part);
    let (mut resumed, mut st) = resume(&Checkpoint::load(&path).unwrap()).unwrap();
    log.extend(pretrain(&mut resumed, &data, &popts, &mut st, |_, _, _| Ok(())).unwrap());
    let params_same = resumed
        .store
        .iter()
        .zip(whole.store.iter())
        .all(|((_, a), (_, b))| a.name == b.name && a.value == b.value);
    let logs_same = log == whole_log;

    verdict(
        10,
        "checkpoint evaluation and resume equivalence",
        eval_same && params_same && logs_same,
        format!("evaluation identical: {eval_same}, resumed log identical: {logs_same}, parameters identical: {params_same}"),
    );
}
