use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{Graph, Tensor};
use crate::repr::TokenLayout;
use crate::ssm::NormKind;
use crate::Error;

fn tiny() -> ModelConfig {
    ModelConfig {
        stride_len: 4,
        n_strides: 16,
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
    }
}

fn random_flows(n: usize, len: usize, seed: u64) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..len).map(|_| rng.gen()).collect())
        .collect()
}

fn refs(v: &[Vec<u8>]) -> Vec<&[u8]> {
    v.iter().map(|f| f.as_slice()).collect()
}

#[test]
fn parameter_counts_match_store() {
    let variants = [
        tiny(),
        ModelConfig {
            use_pos_embed: false,
            ..tiny()
        },
        ModelConfig {
            norm: NormKind::Layer,
            ssm_skip: true,
            ..tiny()
        },
        ModelConfig {
            recon_target: ReconTarget::Embedded,
            ..tiny()
        },
    ];
    for cfg in variants {
        let (pt, ft) = cfg.count_parameters();
        assert_eq!(
            NetMamba::<f32>::new(cfg.clone(), Mode::Pretrain, 0)
                .unwrap()
                .store
                .count(),
            pt
        );
        assert_eq!(
            NetMamba::<f32>::new(cfg, Mode::Finetune, 0)
                .unwrap()
                .store
                .count(),
            ft
        );
    }
}

#[test]
fn default_parameter_counts() {
    let cfg = ModelConfig {
        classes: 20,
        ..Default::default()
    };
    let (pt, ft) = count_parameters(&cfg);
    assert!((1_870_000..=2_530_000).contains(&pt), "{pt}");
    assert!((1_620_000..=2_190_000).contains(&ft), "{ft}");
    assert_eq!(
        NetMamba::<f32>::new(cfg, Mode::Pretrain, 0)
            .unwrap()
            .store
            .count(),
        pt
    );
}

#[test]
fn zero_sample_embeds_to_positions() {
    let cfg = ModelConfig::default();
    let model = NetMamba::<f64>::new(cfg.clone(), Mode::Finetune, 1).unwrap();
    let zeros = vec![0u8; 1600];
    let x = model.prepare(&[&zeros]).unwrap();
    let mut g = Graph::inference();
    let x0 = model.embed(&mut g, &x).unwrap();
    assert_eq!(g.shape(x0), &[1, 401, 256]);
    let pos = model.store.value(model.store.id("embed.pos").unwrap());
    let cls = model.store.value(model.store.id("embed.cls").unwrap());
    let out = g.value(x0).data();
    assert_eq!(&out[..400 * 256], &pos.data()[..400 * 256]);
    for k in 0..256 {
        assert_eq!(
            out[400 * 256 + k],
            pos.data()[400 * 256 + k] + cls.data()[k]
        );
    }
}

#[test]
fn embedding_is_local() {
    let cfg = tiny();
    let model = NetMamba::<f64>::new(cfg, Mode::Finetune, 2).unwrap();
    let a = random_flows(1, 64, 3).remove(0);
    let mut b = a.clone();
    b[4 * 7 + 2] ^= 0x5a;
    let x = model.prepare(&[&a, &b]).unwrap();
    let mut g = Graph::inference();
    let x0 = model.embed(&mut g, &x).unwrap();
    let v = g.value(x0).data();
    let (l, d) = (17, 16);
    for row in 0..l {
        let differs = (0..d).any(|k| v[row * d + k] != v[(l + row) * d + k]);
        assert_eq!(differs, row == 7, "row {row}");
    }
}

#[test]
fn untrained_loss_is_near_uniform_variance() {
    let cfg = tiny();
    let model = NetMamba::<f32>::new(cfg.clone(), Mode::Pretrain, 4).unwrap();
    let flows = random_flows(16, 64, 5);
    let x = model.prepare(&refs(&flows)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let plans: Vec<MaskPlan> = (0..16)
        .map(|_| make_mask(cfg.seq_len(), 0.75, &mut rng))
        .collect();
    let mut g = Graph::inference();
    let out = model.pretrain_forward(&mut g, &x, &plans).unwrap();
    let loss = g.value(out.loss).item() as f64;
    assert!((1.0 / 24.0..=1.0 / 8.0).contains(&loss), "{loss}");
}

#[test]
fn loss_covers_masked_positions_only() {
    let cfg = tiny();
    let model = NetMamba::<f64>::new(cfg.clone(), Mode::Pretrain, 7).unwrap();
    let flows = random_flows(2, 64, 8);
    let x = model.prepare(&refs(&flows)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let plans: Vec<MaskPlan> = (0..2)
        .map(|_| make_mask(cfg.seq_len(), 0.5, &mut rng))
        .collect();
    let mut g = Graph::inference();
    let out = model.pretrain_forward(&mut g, &x, &plans).unwrap();
    let pred = g.value(out.pred);
    let n_mask = plans[0].masked.len();
    assert_eq!(pred.shape(), &[2, n_mask, 4]);

    let mut acc = 0.0;
    for (b, p) in plans.iter().enumerate() {
        for (j, &m) in p.masked.iter().enumerate() {
            for k in 0..4 {
                let t = x.data()[(b * 16 + m) * 4 + k];
                let e = pred.data()[(b * n_mask + j) * 4 + k] - t;
                acc += e * e;
            }
        }
    }
    let manual = acc / (2 * n_mask * 4) as f64;
    assert!((g.value(out.loss).item() - manual).abs() < 1e-12);
}

#[test]
fn empty_mask_gives_zero_loss() {
    let cfg = tiny();
    let model = NetMamba::<f64>::new(cfg, Mode::Pretrain, 1).unwrap();
    let flows = random_flows(1, 64, 1);
    let x = model.prepare(&refs(&flows)).unwrap();
    let mut g = Graph::new();
    let out = model
        .pretrain_forward(&mut g, &x, &[MaskPlan::all_visible(16)])
        .unwrap();
    assert_eq!(g.value(out.loss).item(), 0.0);
    g.backward(out.loss).unwrap();
}

#[test]
fn logits_shape_and_softmax() {
    let model = NetMamba::<f64>::new(tiny(), Mode::Finetune, 3).unwrap();
    let flows = random_flows(2, 64, 2);
    let x = model.prepare(&refs(&flows)).unwrap();
    let mut g = Graph::inference();
    let logits = model.finetune_forward(&mut g, &x).unwrap();
    assert_eq!(g.shape(logits), &[2, 3]);
    for row in g.value(logits).data().chunks(3) {
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let p: f64 = row.iter().map(|v| (v - m).exp() / z).sum();
        assert!((p - 1.0).abs() < 1e-6);
    }
}

#[test]
fn last_stride_reaches_logits() {
    let model = NetMamba::<f64>::new(tiny(), Mode::Finetune, 3).unwrap();
    let a = random_flows(1, 64, 4).remove(0);
    let mut b = a.clone();
    b[63] ^= 0xff;
    let x = model.prepare(&[&a, &b]).unwrap();
    let mut g = Graph::inference();
    let logits = model.finetune_forward(&mut g, &x).unwrap();
    let v = g.value(logits).data().to_vec();
    assert_ne!(&v[..3], &v[3..]);
}

#[test]
fn class_token_sees_every_stride() {
    let model = NetMamba::<f64>::new(tiny(), Mode::Finetune, 11).unwrap();
    let flows = random_flows(1, 64, 12);
    let x = model.prepare(&refs(&flows)).unwrap();
    let mut g = Graph::new();
    let xv = g.leaf(x);
    let x0 = model.embed_var(&mut g, xv).unwrap();
    let logits = model.classify(&mut g, x0).unwrap();
    let loss = g.sum_all(logits);
    let grads = g.backward(loss).unwrap();
    let gx = grads.get(xv).unwrap();
    for s in 0..16 {
        let col = &gx.data()[s * 4..(s + 1) * 4];
        assert!(col.iter().any(|&v| v != 0.0), "stride {s} has no influence");
    }
}

#[test]
fn cross_entropy_values() {
    let mut g = Graph::<f64>::inference();
    let logits = g.constant(Tensor::zeros(&[1, 10]));
    let l = g.softmax_cross_entropy(logits, &[3]).unwrap();
    assert!((g.value(l).item() - 10f64.ln()).abs() < 1e-12);
    let mut t = Tensor::<f64>::zeros(&[1, 4]);
    t.data_mut()[2] = 60.0;
    let logits = g.constant(t);
    let l = g.softmax_cross_entropy(logits, &[2]).unwrap();
    assert!(g.value(l).item() < 1e-20);
    assert!(matches!(
        g.softmax_cross_entropy(logits, &[4]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn seeded_init_is_reproducible_and_shared() {
    let a = NetMamba::<f32>::new(tiny(), Mode::Pretrain, 5).unwrap();
    let b = NetMamba::<f32>::new(tiny(), Mode::Pretrain, 5).unwrap();
    let c = NetMamba::<f32>::new(tiny(), Mode::Finetune, 5).unwrap();
    for ((_, p), (_, q)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(p.value, q.value);
    }
    for (_, p) in c
        .store
        .iter()
        .filter(|(_, p)| NetMamba::<f32>::is_shared_param(&p.name))
    {
        assert_eq!(&p.value, a.store.value(a.store.id(&p.name).unwrap()));
    }
}

#[test]
fn ablation_variants_run() {
    let variants = [
        ModelConfig {
            use_pos_embed: false,
            ..tiny()
        },
        ModelConfig {
            token_layout: TokenLayout::Patch,
            ..tiny()
        },
        ModelConfig {
            recon_target: ReconTarget::Embedded,
            ..tiny()
        },
        ModelConfig {
            norm: NormKind::Layer,
            ..tiny()
        },
    ];
    let flows = random_flows(2, 64, 1);
    for cfg in variants {
        let pt = NetMamba::<f32>::new(cfg.clone(), Mode::Pretrain, 0).unwrap();
        let x = pt.prepare(&refs(&flows)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plans: Vec<_> = (0..2)
            .map(|_| make_mask(cfg.seq_len(), 0.9, &mut rng))
            .collect();
        let mut g = Graph::new();
        let out = pt.pretrain_forward(&mut g, &x, &plans).unwrap();
        g.backward(out.loss).unwrap();

        let ft = NetMamba::<f32>::new(cfg, Mode::Finetune, 0).unwrap();
        let mut g = Graph::new();
        let logits = ft.finetune_forward(&mut g, &x).unwrap();
        assert_eq!(g.shape(logits), &[2, 3]);
    }
}

#[test]
fn patch_layout_reorders_inputs() {
    let cfg = ModelConfig {
        token_layout: TokenLayout::Patch,
        ..tiny()
    };
    let model = NetMamba::<f64>::new(cfg, Mode::Finetune, 0).unwrap();
    let flow: Vec<u8> = (0..64).collect();
    let x = model.prepare(&[&flow]).unwrap();
    let first: Vec<f64> = x.data()[..4].iter().map(|v| (v * 255.0).round()).collect();
    assert_eq!(first, vec![0.0, 1.0, 8.0, 9.0]);
}

#[test]
fn checkpoint_round_trip() {
    let model = NetMamba::<f32>::new(tiny(), Mode::Finetune, 8).unwrap();
    let mut ckpt = Checkpoint::from_model(&model, 42);
    ckpt.extra = serde_json::json!({"epoch": 3});
    let bytes = ckpt.encode().unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back, ckpt);

    let restored = back.to_model().unwrap();
    let flows = random_flows(3, 64, 9);
    let x = model.prepare(&refs(&flows)).unwrap();
    let run = |m: &NetMamba<f32>| {
        let mut g = Graph::inference();
        let l = m.finetune_forward(&mut g, &x).unwrap();
        g.value(l).clone()
    };
    assert_eq!(run(&model), run(&restored));

    assert!(Checkpoint::decode(&bytes[..bytes.len() - 2]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::decode(&extra).is_err());
}

#[test]
fn checkpoint_shape_mismatch_names_tensor() {
    let small = NetMamba::<f32>::new(tiny(), Mode::Pretrain, 0).unwrap();
    let ckpt = Checkpoint::from_model(&small, 0);
    let wider = ModelConfig {
        d_enc: 24,
        e_enc: 48,
        ..tiny()
    };
    let mut ft = NetMamba::<f32>::new(wider, Mode::Finetune, 0).unwrap();
    match ckpt.load_into(&mut ft.store, NetMamba::<f32>::is_shared_param) {
        Err(Error::CheckpointMismatch { name, .. }) => assert_eq!(name, "embed.proj"),
        other => panic!("{other:?}"),
    }
    let mut ok = NetMamba::<f32>::new(tiny(), Mode::Finetune, 1).unwrap();
    ckpt.load_into(&mut ok.store, NetMamba::<f32>::is_shared_param)
        .unwrap();
    let id = ok.store.id("encoder.blocks.1.out").unwrap();
    assert_eq!(
        ok.store.value(id),
        ckpt.get("encoder.blocks.1.out").unwrap()
    );
}
