use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{real, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Normalization applied at the block input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// RMS normalization with a learned gain.
    #[default]
    Rms,
    /// Mean-centering layer normalization with gain and bias.
    Layer,
}

impl std::str::FromStr for NormKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "rms" => Ok(Self::Rms),
            "layer" => Ok(Self::Layer),
            other => Err(format!("unknown norm `{other}` (expected rms|layer)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    /// Residual stream width D.
    pub d_model: usize,
    /// Expanded width E.
    pub d_inner: usize,
    /// State dimension N.
    pub d_state: usize,
    /// Rank of the factored step-size projection.
    pub dt_rank: usize,
    pub conv_width: usize,
    pub norm: NormKind,
    /// Adds a learned `D ⊙ x` skip inside the SSM.
    pub ssm_skip: bool,
    pub eps: f64,
}

impl BlockConfig {
    /// Defaults for width `d_model`: E = 2D, N = 16, rank 16, conv width 4.
    pub fn with_width(d_model: usize) -> Self {
        Self {
            d_model,
            d_inner: 2 * d_model,
            d_state: 16,
            dt_rank: 16,
            conv_width: 4,
            norm: NormKind::Rms,
            ssm_skip: false,
            eps: 1e-5,
        }
    }

    /// Learnable scalars in one block.
    pub fn param_count(&self) -> usize {
        let (d, e, n, r, k) = (
            self.d_model,
            self.d_inner,
            self.d_state,
            self.dt_rank,
            self.conv_width,
        );
        let norm = match self.norm {
            NormKind::Rms => d,
            NormKind::Layer => 2 * d,
        };
        norm + 2 * d * e
            + e * k
            + e
            + 2 * e * n
            + 2 * e * r
            + e
            + e * n
            + e * d
            + if self.ssm_skip { e } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.d_inner == 0
            || self.d_state == 0
            || self.dt_rank == 0
            || self.conv_width == 0
        {
            return Err(Error::Config(format!(
                "block dimensions must be positive: {self:?}"
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config("norm eps must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter handles of one unidirectional selective-SSM block.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub cfg: BlockConfig,
    pub index: usize,
    pub norm_gain: ParamId,
    pub norm_bias: Option<ParamId>,
    pub in_x: ParamId,
    pub in_z: ParamId,
    pub conv_kernel: ParamId,
    pub conv_bias: ParamId,
    pub proj_b: ParamId,
    pub proj_c: ParamId,
    pub dt_down: ParamId,
    pub dt_up: ParamId,
    pub dt_bias: ParamId,
    pub a_log: ParamId,
    pub out: ParamId,
    pub d_skip: Option<ParamId>,
}

fn uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    Tensor::uniform(shape, -bound, bound, rng)
}

impl MambaBlock {
    /// Register a freshly initialized block under `prefix`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        index: usize,
        cfg: BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, e, n, r, k) = (
            cfg.d_model,
            cfg.d_inner,
            cfg.d_state,
            cfg.dt_rank,
            cfg.conv_width,
        );
        let p = |s: &str| format!("{prefix}.{s}");
        let inv_sqrt = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();

        let norm_gain = store.add(p("norm.gain"), Tensor::full(&[d], T::one()), false);
        let norm_bias = match cfg.norm {
            NormKind::Rms => None,
            NormKind::Layer => Some(store.add(p("norm.bias"), Tensor::zeros(&[d]), false)),
        };
        let in_x = store.add(p("in_x"), uniform(&[d, e], inv_sqrt(d), rng), true);
        let in_z = store.add(p("in_z"), uniform(&[d, e], inv_sqrt(d), rng), true);
        let conv_kernel = store.add(p("conv.kernel"), uniform(&[e, k], inv_sqrt(k), rng), true);
        let conv_bias = store.add(p("conv.bias"), uniform(&[e], inv_sqrt(k), rng), false);
        let proj_b = store.add(p("proj_b"), uniform(&[e, n], inv_sqrt(e), rng), true);
        let proj_c = store.add(p("proj_c"), uniform(&[e, n], inv_sqrt(e), rng), true);
        let dt_down = store.add(p("dt.down"), uniform(&[e, r], inv_sqrt(e), rng), true);
        let dt_up = store.add(p("dt.up"), uniform(&[r, e], inv_sqrt(r), rng), true);

        // Step sizes log-uniform in [1e-3, 1e-1] after softplus.
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let bias: Vec<T> = (0..e)
            .map(|_| {
                let dt = (lo + rng.gen::<f64>() * (hi - lo)).exp();
                real(dt + (-(-dt).exp_m1()).ln())
            })
            .collect();
        let dt_bias = store.add(p("dt.bias"), Tensor::new(&[e], bias)?, false);

        // A[e, n] = -(n + 1).
        let a: Vec<T> = (0..e)
            .flat_map(|_| (0..n).map(|s| real(((s + 1) as f64).ln())))
            .collect();
        let a_log = store.add(p("a_log"), Tensor::new(&[e, n], a)?, false);
        let out = store.add(p("out"), uniform(&[e, d], inv_sqrt(e), rng), true);
        let d_skip = cfg
            .ssm_skip
            .then(|| store.add(p("d_skip"), Tensor::full(&[e], T::one()), false));

        Ok(Self {
            cfg,
            index,
            norm_gain,
            norm_bias,
            in_x,
            in_z,
            conv_kernel,
            conv_bias,
            proj_b,
            proj_c,
            dt_down,
            dt_up,
            dt_bias,
            a_log,
            out,
            d_skip,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.norm_gain];
        ids.extend(self.norm_bias);
        ids.extend([
            self.in_x,
            self.in_z,
            self.conv_kernel,
            self.conv_bias,
            self.proj_b,
            self.proj_c,
            self.dt_down,
            self.dt_up,
            self.dt_bias,
            self.a_log,
            self.out,
        ]);
        ids.extend(self.d_skip);
        ids
    }

    /// `X_prev(B, L, D) -> X_next(B, L, D)`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x_prev: Var,
    ) -> Result<Var> {
        let shape = g.shape(x_prev).to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.d_model {
            return Err(Error::shape("block_forward", &shape, &[self.cfg.d_model]));
        }
        let gain = g.param(store, self.norm_gain);
        let xn = match self.norm_bias {
            None => g.rmsnorm(x_prev, gain, self.cfg.eps)?,
            Some(b) => {
                let bias = g.param(store, b);
                g.layernorm(x_prev, gain, bias, self.cfg.eps)?
            }
        };

        let w = g.param(store, self.in_x);
        let x = g.matmul(xn, w)?;
        let w = g.param(store, self.in_z);
        let z = g.matmul(xn, w)?;

        let kernel = g.param(store, self.conv_kernel);
        let cbias = g.param(store, self.conv_bias);
        let xc = g.causal_conv1d(x, kernel, cbias)?;
        let xc = g.silu(xc);

        let w = g.param(store, self.proj_b);
        let b_sel = g.matmul(xc, w)?;
        let w = g.param(store, self.proj_c);
        let c_sel = g.matmul(xc, w)?;

        let w = g.param(store, self.dt_down);
        let dt = g.matmul(xc, w)?;
        let w = g.param(store, self.dt_up);
        let dt = g.matmul(dt, w)?;
        let bias = g.param(store, self.dt_bias);
        let dt = g.add(dt, bias)?;
        let delta = g.softplus(dt);

        let a_log = g.param(store, self.a_log);
        let a = g.exp(a_log);
        let a = g.neg(a);

        let mut y = g.selective_scan(xc, delta, a, b_sel, c_sel)?;
        if let Some(d) = self.d_skip {
            let d = g.param(store, d);
            let skip = g.mul(xc, d)?;
            y = g.add(y, skip)?;
        }

        let gate = g.silu(z);
        let y = g.mul(y, gate)?;
        let w = g.param(store, self.out);
        let y = g.matmul(y, w)?;
        let out = g.add(y, x_prev)?;
        if !g.value(out).is_finite() {
            return Err(Error::NumericFault(format!("block {}", self.index)));
        }
        Ok(out)
    }
}

/// A stack of blocks followed by a final normalization.
#[derive(Clone, Debug)]
pub struct MambaStack {
    pub blocks: Vec<MambaBlock>,
    pub final_gain: ParamId,
    pub final_bias: Option<ParamId>,
    pub cfg: BlockConfig,
}

impl MambaStack {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        depth: usize,
        cfg: BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| MambaBlock::new(store, &format!("{prefix}.blocks.{i}"), i, cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let d = cfg.d_model;
        let final_gain = store.add(
            format!("{prefix}.norm.gain"),
            Tensor::full(&[d], T::one()),
            false,
        );
        let final_bias = match cfg.norm {
            NormKind::Rms => None,
            NormKind::Layer => {
                Some(store.add(format!("{prefix}.norm.bias"), Tensor::zeros(&[d]), false))
            }
        };
        Ok(Self {
            blocks,
            final_gain,
            final_bias,
            cfg,
        })
    }

    pub fn param_count(&self) -> usize {
        let norm = match self.cfg.norm {
            NormKind::Rms => self.cfg.d_model,
            NormKind::Layer => 2 * self.cfg.d_model,
        };
        self.blocks.len() * self.cfg.param_count() + norm
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.blocks.iter().flat_map(|b| b.param_ids()).collect();
        ids.push(self.final_gain);
        ids.extend(self.final_bias);
        ids
    }

    /// All blocks, without the final normalization.
    pub fn forward_blocks<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        self.blocks
            .iter()
            .try_fold(x, |h, b| b.forward(g, store, h))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.forward_blocks(g, store, x)?;
        let gain = g.param(store, self.final_gain);
        match self.final_bias {
            None => g.rmsnorm(h, gain, self.cfg.eps),
            Some(b) => {
                let bias = g.param(store, b);
                g.layernorm(h, gain, bias, self.cfg.eps)
            }
        }
    }
}
