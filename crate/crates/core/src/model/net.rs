use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, ReconTarget};
use super::mask::MaskPlan;
use crate::autodiff::{real, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::ssm::MambaStack;

/// Which heads a model carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Encoder, decoder and reconstruction head.
    Pretrain,
    /// Encoder and classification head.
    Finetune,
}

#[derive(Clone, Debug)]
struct Decoder {
    proj_w: ParamId,
    proj_b: ParamId,
    mask_token: ParamId,
    pos: Option<ParamId>,
    stack: MambaStack,
    recon_w: ParamId,
    recon_b: ParamId,
}

#[derive(Clone, Debug)]
struct Head {
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

/// Outputs of a masked-reconstruction pass.
#[derive(Clone, Copy, Debug)]
pub struct PretrainOutput {
    /// `(B, masked, width)` predictions.
    pub pred: Var,
    pub loss: Var,
}

/// Stride embedding, selective-SSM encoder and either the pre-training
/// decoder or the classification head.
#[derive(Clone, Debug)]
pub struct NetMamba<T> {
    pub cfg: ModelConfig,
    pub mode: Mode,
    pub store: ParamStore<T>,
    embed_w: ParamId,
    cls_token: ParamId,
    enc_pos: Option<ParamId>,
    encoder: MambaStack,
    decoder: Option<Decoder>,
    head: Option<Head>,
    layout: Vec<usize>,
}

impl<T: Real> NetMamba<T> {
    /// Fresh model. Shared parameters are drawn first, so the same seed gives
    /// the same embedding and encoder in both modes.
    pub fn new(cfg: ModelConfig, mode: Mode, seed: u64) -> Result<Self> {
        match mode {
            Mode::Pretrain => cfg.validate()?,
            Mode::Finetune => cfg.validate_classifier()?,
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (ls, l, d, dd) = (cfg.stride_len, cfg.seq_len(), cfg.d_enc, cfg.d_dec);
        let bound = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

        let embed_w = store.add(
            "embed.proj",
            Tensor::uniform(&[ls, d], -bound(ls), bound(ls), &mut rng),
            true,
        );
        let cls_token = store.add("embed.cls", Tensor::randn(&[d], 0.02, &mut rng), false);
        let enc_pos = cfg
            .use_pos_embed
            .then(|| store.add("embed.pos", Tensor::randn(&[l, d], 0.02, &mut rng), false));
        let encoder = MambaStack::new(
            &mut store,
            "encoder",
            cfg.depth_enc,
            cfg.encoder_block(),
            &mut rng,
        )?;

        let (decoder, head) = match mode {
            Mode::Pretrain => {
                let proj_w = store.add(
                    "enc2dec.weight",
                    Tensor::uniform(&[d, dd], -bound(d), bound(d), &mut rng),
                    true,
                );
                let proj_b = store.add("enc2dec.bias", Tensor::zeros(&[dd]), false);
                let mask_token = store.add(
                    "decoder.mask_token",
                    Tensor::randn(&[dd], 0.02, &mut rng),
                    false,
                );
                let pos = cfg.use_pos_embed.then(|| {
                    store.add(
                        "decoder.pos",
                        Tensor::randn(&[l, dd], 0.02, &mut rng),
                        false,
                    )
                });
                let stack = MambaStack::new(
                    &mut store,
                    "decoder",
                    cfg.depth_dec,
                    cfg.decoder_block(),
                    &mut rng,
                )?;
                let (width, bias) = match cfg.recon_target {
                    ReconTarget::Raw => (ls, 0.5),
                    ReconTarget::Embedded => (d, 0.0),
                };
                let recon_w = store.add(
                    "recon.weight",
                    Tensor::randn(&[dd, width], 0.01, &mut rng),
                    true,
                );
                let recon_b = store.add("recon.bias", Tensor::full(&[width], real(bias)), false);
                (
                    Some(Decoder {
                        proj_w,
                        proj_b,
                        mask_token,
                        pos,
                        stack,
                        recon_w,
                        recon_b,
                    }),
                    None,
                )
            }
            Mode::Finetune => {
                let c = cfg.classes;
                let fc1_w = store.add(
                    "head.fc1.weight",
                    Tensor::uniform(&[d, d], -bound(d), bound(d), &mut rng),
                    true,
                );
                let fc1_b = store.add("head.fc1.bias", Tensor::zeros(&[d]), false);
                let fc2_w = store.add(
                    "head.fc2.weight",
                    Tensor::uniform(&[d, c], -bound(d), bound(d), &mut rng),
                    true,
                );
                let fc2_b = store.add("head.fc2.bias", Tensor::zeros(&[c]), false);
                (
                    None,
                    Some(Head {
                        fc1_w,
                        fc1_b,
                        fc2_w,
                        fc2_b,
                    }),
                )
            }
        };
        let layout = cfg.token_layout.permutation(cfg.flow_len(), ls)?;
        Ok(Self {
            cfg,
            mode,
            store,
            embed_w,
            cls_token,
            enc_pos,
            encoder,
            decoder,
            head,
            layout,
        })
    }

    pub fn encoder(&self) -> &MambaStack {
        &self.encoder
    }

    /// Names of the parameters shared by both modes.
    pub fn is_shared_param(name: &str) -> bool {
        name.starts_with("embed.") || name.starts_with("encoder.")
    }

    /// Flow byte arrays to normalized `(batch, strides, stride_len)` inputs, token layout applied.
    pub fn prepare(&self, flows: &[&[u8]]) -> Result<Tensor<T>> {
        let lb = self.cfg.flow_len();
        let scale = real::<T>(1.0 / 255.0);
        let mut data = Vec::with_capacity(flows.len() * lb);
        for f in flows {
            if f.len() != lb {
                return Err(Error::shape("prepare", &[f.len()], &[lb]));
            }
            data.extend(self.layout.iter().map(|&i| T::from(f[i]).unwrap() * scale));
        }
        Tensor::new(
            &[flows.len(), self.cfg.n_strides, self.cfg.stride_len],
            data,
        )
    }

    /// `(batch, strides, stride_len) -> (batch, seq_len, d_enc)`: projected strides, class token
    /// appended last, positional table added.
    pub fn embed(&self, g: &mut Graph<T>, inputs: &Tensor<T>) -> Result<Var> {
        let s = inputs.shape();
        if s.len() != 3 || s[1] != self.cfg.n_strides || s[2] != self.cfg.stride_len {
            return Err(Error::shape(
                "embed",
                s,
                &[0, self.cfg.n_strides, self.cfg.stride_len],
            ));
        }
        let x = g.constant(inputs.clone());
        self.embed_var(g, x)
    }

    /// [`NetMamba::embed`] for an input already in the graph.
    pub fn embed_var(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let b = g.shape(x)[0];
        let w = g.param(&self.store, self.embed_w);
        let tokens = g.matmul(x, w)?;
        let cls = g.param(&self.store, self.cls_token);
        let cls = g.broadcast_leading(cls, &[b, 1])?;
        let x0 = g.concat(&[tokens, cls], 1)?;
        match self.enc_pos {
            Some(pos) => {
                let pos = g.param(&self.store, pos);
                g.add(x0, pos)
            }
            None => Ok(x0),
        }
    }

    /// Encoder hidden states over all rows, without the final norm.
    pub fn encode(&self, g: &mut Graph<T>, inputs: &Tensor<T>) -> Result<Var> {
        let x0 = self.embed(g, inputs)?;
        self.encoder.forward_blocks(g, &self.store, x0)
    }

    /// Masked reconstruction with one plan per batch element.
    pub fn pretrain_forward(
        &self,
        g: &mut Graph<T>,
        inputs: &Tensor<T>,
        plans: &[MaskPlan],
    ) -> Result<PretrainOutput> {
        let dec = self.decoder.as_ref().ok_or_else(|| {
            Error::Contract("pre-training needs a model built in pretrain mode".into())
        })?;
        let (b, n, ls) = (inputs.shape()[0], self.cfg.n_strides, self.cfg.stride_len);
        if plans.len() != b {
            return Err(Error::shape("pretrain_forward", &[b], &[plans.len()]));
        }
        let n_vis = plans.first().map_or(0, |p| p.visible.len());
        if plans
            .iter()
            .any(|p| p.n_strides() != n || p.visible.len() != n_vis)
        {
            return Err(Error::Contract(
                "mask plans disagree with the model geometry".into(),
            ));
        }
        let n_mask = n - n_vis;

        let x0 = self.embed(g, inputs)?;
        let enc_rows: Vec<usize> = plans.iter().flat_map(|p| p.encoder_rows()).collect();
        let visible = g.gather_rows(x0, &enc_rows)?;
        let h = self.encoder.forward(g, &self.store, visible)?;

        let w = g.param(&self.store, dec.proj_w);
        let h = g.matmul(h, w)?;
        let bias = g.param(&self.store, dec.proj_b);
        let h = g.add(h, bias)?;
        let full = if n_mask > 0 {
            let tok = g.param(&self.store, dec.mask_token);
            let masks = g.broadcast_leading(tok, &[b, n_mask])?;
            g.concat(&[h, masks], 1)?
        } else {
            h
        };
        let order: Vec<usize> = plans.iter().flat_map(|p| p.unshuffle()).collect();
        let mut xd = g.gather_rows(full, &order)?;
        if let Some(pos) = dec.pos {
            let pos = g.param(&self.store, pos);
            xd = g.add(xd, pos)?;
        }
        let hd = dec.stack.forward(g, &self.store, xd)?;

        let masked_rows: Vec<usize> = plans
            .iter()
            .flat_map(|p| p.masked.iter().copied())
            .collect();
        let hm = g.gather_rows(hd, &masked_rows)?;
        let w = g.param(&self.store, dec.recon_w);
        let pred = g.matmul(hm, w)?;
        let bias = g.param(&self.store, dec.recon_b);
        let pred = g.add(pred, bias)?;

        let target = match self.cfg.recon_target {
            ReconTarget::Raw => {
                let src = inputs.data();
                let mut t = Vec::with_capacity(b * n_mask * ls);
                for (bi, p) in plans.iter().enumerate() {
                    for &m in &p.masked {
                        let off = (bi * n + m) * ls;
                        t.extend_from_slice(&src[off..off + ls]);
                    }
                }
                Tensor::new(&[b, n_mask, ls], t)?
            }
            ReconTarget::Embedded => {
                let d = self.cfg.d_enc;
                let l = self.cfg.seq_len();
                let src = g.value(x0).data();
                let mut t = Vec::with_capacity(b * n_mask * d);
                for (bi, p) in plans.iter().enumerate() {
                    for &m in &p.masked {
                        let off = (bi * l + m) * d;
                        t.extend_from_slice(&src[off..off + d]);
                    }
                }
                Tensor::new(&[b, n_mask, d], t)?
            }
        };
        let loss = g.mse(pred, &target, None)?;
        if !g.value(loss).is_finite() {
            return Err(Error::NumericFault("reconstruction loss".into()));
        }
        Ok(PretrainOutput { pred, loss })
    }

    /// Class logits `(B, C)` from the normalized class-token row.
    pub fn finetune_forward(&self, g: &mut Graph<T>, inputs: &Tensor<T>) -> Result<Var> {
        let x0 = self.embed(g, inputs)?;
        self.classify(g, x0)
    }

    /// Classification head over embedded tokens `(batch, seq_len, d_enc)`.
    pub fn classify(&self, g: &mut Graph<T>, x0: Var) -> Result<Var> {
        let head = self.head.as_ref().ok_or_else(|| {
            Error::Contract("classification needs a model built in finetune mode".into())
        })?;
        let (b, l, d) = (g.shape(x0)[0], self.cfg.seq_len(), self.cfg.d_enc);
        let h = self.encoder.forward_blocks(g, &self.store, x0)?;
        let last = g.slice(h, 1, l - 1, l)?;
        let gain = g.param(&self.store, self.encoder.final_gain);
        let last = match self.encoder.final_bias {
            None => g.rmsnorm(last, gain, self.encoder.cfg.eps)?,
            Some(bias) => {
                let bias = g.param(&self.store, bias);
                g.layernorm(last, gain, bias, self.encoder.cfg.eps)?
            }
        };
        let last = g.reshape(last, &[b, d])?;
        let w = g.param(&self.store, head.fc1_w);
        let z = g.matmul(last, w)?;
        let bias = g.param(&self.store, head.fc1_b);
        let z = g.add(z, bias)?;
        let z = g.silu(z);
        let w = g.param(&self.store, head.fc2_w);
        let z = g.matmul(z, w)?;
        let bias = g.param(&self.store, head.fc2_b);
        let logits = g.add(z, bias)?;
        if !g.value(logits).is_finite() {
            return Err(Error::NumericFault("classifier logits".into()));
        }
        Ok(logits)
    }

    /// Mean cross-entropy over the batch.
    pub fn loss_cls(&self, g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
        g.softmax_cross_entropy(logits, labels)
    }

    /// Copy every shared (embedding and encoder) tensor from `other`.
    pub fn copy_shared_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        let names: Vec<String> = self
            .store
            .iter()
            .filter(|(_, p)| Self::is_shared_param(&p.name))
            .map(|(_, p)| p.name.clone())
            .collect();
        for name in names {
            let src = other.id(&name).ok_or_else(|| Error::CheckpointMismatch {
                name: name.clone(),
                msg: "missing from source".into(),
            })?;
            let id = self.store.id(&name).unwrap();
            self.store.set_value(id, other.value(src).clone())?;
        }
        Ok(())
    }
}

/// Analytic learnable-scalar counts `(pretrain, finetune)`.
pub fn count_parameters(cfg: &ModelConfig) -> (usize, usize) {
    cfg.count_parameters()
}
