use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::repr::TokenLayout;
use crate::ssm::{BlockConfig, NormKind};

/// What the pre-training head reconstructs at masked positions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconTarget {
    /// Normalized stride bytes.
    #[default]
    Raw,
    /// The embedded token rows (detached).
    Embedded,
}

impl std::str::FromStr for ReconTarget {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "raw" => Ok(Self::Raw),
            "embedded" => Ok(Self::Embedded),
            other => Err(format!(
                "unknown reconstruction target `{other}` (expected raw|embedded)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stride_len: usize,
    pub n_strides: usize,
    pub d_enc: usize,
    pub e_enc: usize,
    pub depth_enc: usize,
    pub d_dec: usize,
    pub e_dec: usize,
    pub depth_dec: usize,
    pub d_state: usize,
    pub dt_rank: usize,
    pub conv_width: usize,
    pub mask_ratio: f64,
    pub classes: usize,
    pub use_pos_embed: bool,
    pub norm: NormKind,
    pub ssm_skip: bool,
    pub recon_target: ReconTarget,
    pub token_layout: TokenLayout,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stride_len: 4,
            n_strides: 400,
            d_enc: 256,
            e_enc: 512,
            depth_enc: 4,
            d_dec: 128,
            e_dec: 256,
            depth_dec: 2,
            d_state: 16,
            dt_rank: 16,
            conv_width: 4,
            mask_ratio: 0.9,
            classes: 2,
            use_pos_embed: true,
            norm: NormKind::Rms,
            ssm_skip: false,
            recon_target: ReconTarget::Raw,
            token_layout: TokenLayout::Stride,
        }
    }
}

/// Number of visible tokens (class token included) for `seq_len` tokens.
pub fn visible_len(seq_len: usize, mask_ratio: f64) -> usize {
    (((1.0 - mask_ratio) * seq_len as f64) - 1e-9)
        .ceil()
        .max(1.0) as usize
}

impl ModelConfig {
    /// Stride tokens plus the class token.
    pub fn seq_len(&self) -> usize {
        self.n_strides + 1
    }

    /// Visible tokens, class token included.
    pub fn visible_len(&self) -> usize {
        visible_len(self.seq_len(), self.mask_ratio)
    }

    pub fn flow_len(&self) -> usize {
        self.n_strides * self.stride_len
    }

    pub fn encoder_block(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_enc,
            d_inner: self.e_enc,
            d_state: self.d_state,
            dt_rank: self.dt_rank,
            conv_width: self.conv_width,
            norm: self.norm,
            ssm_skip: self.ssm_skip,
            eps: 1e-5,
        }
    }

    pub fn decoder_block(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_dec,
            d_inner: self.e_dec,
            ..self.encoder_block()
        }
    }

    fn recon_width(&self) -> usize {
        match self.recon_target {
            ReconTarget::Raw => self.stride_len,
            ReconTarget::Embedded => self.d_enc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride_len == 0 || self.n_strides == 0 {
            return Err(Error::Config(
                "stride_len and n_strides must be positive".into(),
            ));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!(
                "mask ratio {} outside (0, 1)",
                self.mask_ratio
            )));
        }
        if self.depth_enc == 0 {
            return Err(Error::Config("encoder depth must be at least 1".into()));
        }
        self.encoder_block().validate()?;
        self.decoder_block().validate()?;
        self.token_layout.check(self.flow_len(), self.stride_len)
    }

    pub fn validate_classifier(&self) -> Result<()> {
        self.validate()?;
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        Ok(())
    }

    fn norm_params(&self, d: usize) -> usize {
        match self.norm {
            NormKind::Rms => d,
            NormKind::Layer => 2 * d,
        }
    }

    fn shared_params(&self) -> usize {
        let (l, d) = (self.seq_len(), self.d_enc);
        let embed = self.stride_len * d + d + if self.use_pos_embed { l * d } else { 0 };
        let encoder = self.depth_enc * self.encoder_block().param_count() + self.norm_params(d);
        embed + encoder
    }

    /// Learnable scalar counts of the pre-training and fine-tuning models.
    pub fn count_parameters(&self) -> (usize, usize) {
        let (l, d, dd) = (self.seq_len(), self.d_enc, self.d_dec);
        let shared = self.shared_params();
        let decoder = d * dd
            + dd
            + dd
            + if self.use_pos_embed { l * dd } else { 0 }
            + self.depth_dec * self.decoder_block().param_count()
            + self.norm_params(dd)
            + dd * self.recon_width()
            + self.recon_width();
        let head = d * d + d + d * self.classes + self.classes;
        (shared + decoder, shared + head)
    }
}
