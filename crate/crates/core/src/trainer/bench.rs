use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig, NetMamba};

pub const BENCH_CSV_HEADER: &str = "batch,seq_len,samples_per_sec,peak_bytes";

/// Peak heap usage source. The library cannot install a global allocator,
/// so binaries that track allocations implement this.
pub trait MemoryProbe {
    fn reset_peak(&self);
    fn peak_bytes(&self) -> Option<u64>;
}

/// Probe that reports nothing.
pub struct NoProbe;

impl MemoryProbe for NoProbe {
    fn reset_peak(&self) {}

    fn peak_bytes(&self) -> Option<u64> {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub batch: usize,
    /// Token count including the class token.
    pub seq_len: usize,
    pub samples_per_sec: f64,
    /// Median wall-clock of one forward pass.
    pub median_secs: f64,
    pub peak_bytes: Option<u64>,
}

impl BenchRow {
    pub fn csv_line(&self) -> String {
        let peak = self.peak_bytes.map(|b| b.to_string()).unwrap_or_default();
        format!(
            "{},{},{:.3},{}",
            self.batch, self.seq_len, self.samples_per_sec, peak
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub warmup: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            warmup: 1,
            runs: 5,
            seed: 0,
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Copy of `base` whose token sequence (class token included) has `seq_len` rows.
pub fn config_for_length(base: &ModelConfig, seq_len: usize) -> Result<ModelConfig> {
    if seq_len < 2 {
        return Err(Error::Config(format!(
            "bench length {seq_len} leaves no stride tokens"
        )));
    }
    let cfg = ModelConfig {
        n_strides: seq_len - 1,
        ..base.clone()
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Median timing of inference-mode encoder forward passes on random flows.
pub fn bench_encoder(
    model: &NetMamba<f32>,
    batch: usize,
    opts: &BenchOptions,
    probe: &dyn MemoryProbe,
) -> Result<BenchRow> {
    if batch == 0 || opts.runs == 0 {
        return Err(Error::Config(
            "bench needs a positive batch and run count".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let flow_len = model.cfg.flow_len();
    let flows: Vec<Vec<u8>> = (0..batch)
        .map(|_| (0..flow_len).map(|_| rng.gen()).collect())
        .collect();
    let refs: Vec<&[u8]> = flows.iter().map(Vec::as_slice).collect();
    let inputs: Tensor<f32> = model.prepare(&refs)?;

    let run = || -> Result<f64> {
        let t = Instant::now();
        let mut g = Graph::inference();
        let out = model.encode(&mut g, &inputs)?;
        std::hint::black_box(g.value(out).data()[0]);
        Ok(t.elapsed().as_secs_f64())
    };
    for _ in 0..opts.warmup {
        run()?;
    }
    probe.reset_peak();
    let times = (0..opts.runs).map(|_| run()).collect::<Result<Vec<_>>>()?;
    let peak_bytes = probe.peak_bytes();
    let med = median(times);
    Ok(BenchRow {
        batch,
        seq_len: model.cfg.seq_len(),
        samples_per_sec: batch as f64 / med.max(f64::MIN_POSITIVE),
        median_secs: med,
        peak_bytes,
    })
}

/// One row per (batch, length) pair, encoder weights drawn once per length.
pub fn bench_grid(
    base: &ModelConfig,
    batches: &[usize],
    lengths: &[usize],
    opts: &BenchOptions,
    probe: &dyn MemoryProbe,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(batches.len() * lengths.len());
    for &len in lengths {
        let model = NetMamba::<f32>::new(config_for_length(base, len)?, Mode::Finetune, opts.seed)?;
        for &b in batches {
            rows.push(bench_encoder(&model, b, opts, probe)?);
        }
    }
    Ok(rows)
}

/// Slope of the least-squares line through `(ln x, ln y)`.
pub fn scaling_exponent(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::Contract(
            "scaling fit needs two or more positive points".into(),
        ));
    }
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Contract("scaling fit needs distinct lengths".into()));
    }
    Ok(sxy / sxx)
}

/// Encoder wall-clock exponent over `lengths` at a fixed batch.
pub fn length_scaling(
    base: &ModelConfig,
    batch: usize,
    lengths: &[usize],
    opts: &BenchOptions,
) -> Result<(f64, Vec<BenchRow>)> {
    let rows = bench_grid(base, &[batch], lengths, opts, &NoProbe)?;
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.seq_len as f64, r.median_secs))
        .collect();
    Ok((scaling_exponent(&pts)?, rows))
}
