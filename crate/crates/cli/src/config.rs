//! `key = value` run configuration.
//!
//! Layering is built-in defaults, then the config file, then command-line
//! overrides. Every layer goes through [`RunConfig::set`], so unknown keys and
//! badly typed values are rejected the same way wherever they come from.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use netmamba_core::model::ModelConfig;
use netmamba_core::repr::ReprConfig;
use netmamba_core::trainer::{AdamWConfig, FinetuneOptions, PretrainOptions};
use serde::Serialize;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExtractSettings {
    /// Classes with fewer samples are dropped.
    pub limit_lower: usize,
    /// Larger classes are subsampled to this many.
    pub limit_upper: usize,
    pub split: (f64, f64, f64),
}

impl Default for ExtractSettings {
    fn default() -> Self {
        Self {
            limit_lower: 0,
            limit_upper: usize::MAX,
            split: (0.8, 0.1, 0.1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchSettings {
    pub batches: Vec<usize>,
    /// Token counts, class token included.
    pub lengths: Vec<usize>,
    pub runs: usize,
    pub warmup: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            batches: vec![1, 8, 32],
            lengths: vec![401, 801, 1601],
            runs: 5,
            warmup: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub repr: ReprConfig,
    /// Stride length, stride count and class count are taken from the data.
    pub model: ModelConfig,
    pub pretrain: PretrainOptions,
    /// Save every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub finetune: FinetuneOptions,
    /// Fraction of the training split used for fine-tuning.
    pub train_fraction: f64,
    pub extract: ExtractSettings,
    pub bench: BenchSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            repr: ReprConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainOptions::default(),
            checkpoint_every: 0,
            finetune: FinetuneOptions::default(),
            train_fraction: 1.0,
            extract: ExtractSettings::default(),
            bench: BenchSettings::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| CliError::Usage(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, CliError> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, CliError>
where
    T::Err: Display,
{
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn set_adamw(cfg: &mut AdamWConfig, field: &str, key: &str, value: &str) -> Result<bool, CliError> {
    match field {
        "beta1" => cfg.beta1 = parse(key, value)?,
        "beta2" => cfg.beta2 = parse(key, value)?,
        "eps" => cfg.eps = parse(key, value)?,
        "weight_decay" => cfg.weight_decay = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    /// Assign one key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        let (r, m) = (&mut self.repr, &mut self.model);
        match key {
            "seed" => self.seed = parse(key, value)?,

            "packets" => r.packets = parse(key, value)?,
            "header_bytes" => r.header_bytes = parse(key, value)?,
            "payload_bytes" => r.payload_bytes = parse(key, value)?,
            "stride_len" => r.stride_len = parse(key, value)?,
            "anonymize_ips" => r.anonymize_ips = parse(key, value)?,
            "include_header" => r.include_header = parse(key, value)?,
            "include_payload" => r.include_payload = parse(key, value)?,
            "drop_dhcp" => r.drop_dhcp = parse(key, value)?,
            "min_packets" => r.min_packets = parse(key, value)?,

            "d_enc" => m.d_enc = parse(key, value)?,
            "e_enc" => m.e_enc = parse(key, value)?,
            "depth_enc" => m.depth_enc = parse(key, value)?,
            "d_dec" => m.d_dec = parse(key, value)?,
            "e_dec" => m.e_dec = parse(key, value)?,
            "depth_dec" => m.depth_dec = parse(key, value)?,
            "d_state" => m.d_state = parse(key, value)?,
            "dt_rank" => m.dt_rank = parse(key, value)?,
            "conv_width" => m.conv_width = parse(key, value)?,
            "mask_ratio" => m.mask_ratio = parse(key, value)?,
            "use_pos_embed" => m.use_pos_embed = parse(key, value)?,
            "norm" => m.norm = parse(key, value)?,
            "ssm_skip" => m.ssm_skip = parse(key, value)?,
            "recon_target" => m.recon_target = parse(key, value)?,
            "token_layout" => m.token_layout = parse(key, value)?,

            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "train_fraction" => self.train_fraction = parse(key, value)?,

            "limit_lower" => self.extract.limit_lower = parse(key, value)?,
            "limit_upper" => self.extract.limit_upper = parse(key, value)?,
            "split_train" => self.extract.split.0 = parse(key, value)?,
            "split_val" => self.extract.split.1 = parse(key, value)?,
            "split_test" => self.extract.split.2 = parse(key, value)?,

            "bench.batches" => self.bench.batches = parse_list(key, value)?,
            "bench.lengths" => self.bench.lengths = parse_list(key, value)?,
            "bench.runs" => self.bench.runs = parse(key, value)?,
            "bench.warmup" => self.bench.warmup = parse(key, value)?,

            _ => {
                if let Some(field) = key.strip_prefix("pretrain.") {
                    let p = &mut self.pretrain;
                    match field {
                        "batch" => p.batch = parse(key, value)?,
                        "steps" => p.steps = parse(key, value)?,
                        "lr" => p.lr = parse(key, value)?,
                        "warmup_frac" => p.warmup_frac = parse(key, value)?,
                        "constant_lr" => p.constant_lr = parse(key, value)?,
                        "scale_lr" => p.scale_lr = parse(key, value)?,
                        "clip" => p.clip = parse(key, value)?,
                        _ if set_adamw(&mut p.adamw, field, key, value)? => {}
                        _ => return Err(unknown(key)),
                    }
                } else if let Some(field) = key.strip_prefix("finetune.") {
                    let f = &mut self.finetune;
                    match field {
                        "batch" => f.batch = parse(key, value)?,
                        "epochs" => f.epochs = parse(key, value)?,
                        "lr" => f.lr = parse(key, value)?,
                        "warmup_frac" => f.warmup_frac = parse(key, value)?,
                        "constant_lr" => f.constant_lr = parse(key, value)?,
                        "scale_lr" => f.scale_lr = parse(key, value)?,
                        "clip" => f.clip = parse(key, value)?,
                        "eval_batch" => f.eval_batch = parse(key, value)?,
                        "target_val_accuracy" => f.target_val_accuracy = parse_opt(key, value)?,
                        _ if set_adamw(&mut f.adamw, field, key, value)? => {}
                        _ => return Err(unknown(key)),
                    }
                } else {
                    return Err(unknown(key));
                }
            }
        }
        Ok(())
    }

    /// Apply `key = value` lines. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("{origin}:{}: expected `key = value`", n + 1))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| CliError::Usage(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Defaults, then `file`, then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.pretrain.seed = cfg.seed;
        cfg.finetune.seed = cfg.seed;
        Ok(cfg)
    }
}

fn unknown(key: &str) -> CliError {
    CliError::Usage(format!("unknown config key `{key}`"))
}

/// Split `key=value` from a `--set` flag.
pub fn parse_override(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}
