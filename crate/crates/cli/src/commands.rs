use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use netmamba_core::model::{Checkpoint, Mode, ModelConfig, NetMamba};
use netmamba_core::repr::{
    balance_dataset, parse_capture, samples_from_packets, split_dataset, write_capture, Manifest,
    StrideFile, StrideHeader, StrideRecord,
};
use netmamba_core::trainer::{
    bench_grid, evaluate, finetune, pretrain, resume, scaling_exponent, synth::synth_captures,
    training_checkpoint, BenchOptions, OptimState, SynthConfig, BENCH_CSV_HEADER,
};
use serde::Serialize;
use serde_json::json;

use crate::alloc::HeapProbe;
use crate::config::{parse_override, RunConfig};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "netmamba",
    version,
    about = "Traffic classification with a selective state space encoder"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct Common {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    pub set: Vec<(String, String)>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn `<class>/*.pcap` captures into stride sample files.
    Extract(ExtractArgs),
    /// Masked-reconstruction pre-training.
    Pretrain(PretrainArgs),
    /// Supervised fine-tuning.
    Finetune(FinetuneArgs),
    /// Score a fine-tuned checkpoint.
    Evaluate(EvaluateArgs),
    /// Encoder throughput and length scaling.
    Bench(BenchArgs),
    /// Write a seeded synthetic capture corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub min_packets: Option<usize>,
    #[arg(long)]
    pub no_anonymize_ips: bool,
    #[arg(long, conflicts_with = "no_payload")]
    pub no_header: bool,
    #[arg(long)]
    pub no_payload: bool,
    #[arg(long)]
    pub limit_lower: Option<usize>,
    #[arg(long)]
    pub limit_upper: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Sample file, or an extract directory (its train split is used).
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub output: PathBuf,
    /// Loss log CSV; defaults to `loss.csv` beside the checkpoint.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from a checkpoint written by this command.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("start").required(true).args(["init", "from_scratch"])))]
pub struct FinetuneArgs {
    /// Extract directory holding train, val and test splits.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Pre-trained checkpoint providing the encoder.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub from_scratch: bool,
    /// Metrics JSON; printed to stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Per-epoch CSV log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sample file, or an extract directory (its test split is used).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Take model dimensions from this checkpoint instead of the config.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated batch sizes.
    #[arg(long)]
    pub batches: Option<String>,
    /// Comma-separated token counts (class token included).
    #[arg(long)]
    pub lengths: Option<String>,
    #[arg(long)]
    pub runs: Option<usize>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[command(flatten)]
    pub common: Common,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Extract(a) => cmd_extract(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn load_config(common: &Common, flags: Vec<(&str, Option<String>)>) -> Result<RunConfig, CliError> {
    let mut overrides = common.set.clone();
    if let Some(s) = common.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    overrides.extend(
        flags
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| (k.to_string(), v))),
    );
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn flag<T: ToString>(v: Option<T>) -> Option<String> {
    v.map(|v| v.to_string())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(netmamba_core::Error::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

fn is_capture(p: &Path) -> bool {
    p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("pcap" | "cap"))
}

#[derive(Debug, Default, Serialize)]
struct ClassSummary {
    name: String,
    files: usize,
    packets_seen: usize,
    non_ip_dropped: usize,
    malformed: usize,
    flows_seen: usize,
    flows_too_short: usize,
    samples: usize,
    kept: usize,
}

#[derive(Debug, Serialize)]
struct FileError {
    file: String,
    error: String,
}

fn cmd_extract(a: ExtractArgs) -> Result<(), CliError> {
    let cfg = load_config(
        &a.common,
        vec![
            ("min_packets", flag(a.min_packets)),
            ("anonymize_ips", a.no_anonymize_ips.then(|| "false".into())),
            ("include_header", a.no_header.then(|| "false".into())),
            ("include_payload", a.no_payload.then(|| "false".into())),
            ("limit_lower", flag(a.limit_lower)),
            ("limit_upper", flag(a.limit_upper)),
        ],
    )?;
    cfg.repr.validate()?;
    if !a.input.is_dir() {
        return Err(CliError::Usage(format!(
            "input directory {} does not exist",
            a.input.display()
        )));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(&a.input)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.is_empty() {
        return Err(CliError::Usage(format!(
            "{} has no class subdirectories",
            a.input.display()
        )));
    }

    let mut summaries = Vec::new();
    let mut errors = Vec::new();
    let mut per_class: Vec<Vec<Vec<u8>>> = Vec::new();
    for (c, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        let mut s = ClassSummary {
            name: name.clone(),
            ..Default::default()
        };
        let mut samples = Vec::new();
        for file in sorted_entries(dir)?.into_iter().filter(|p| is_capture(p)) {
            let rel = format!(
                "{name}/{}",
                file.file_name().unwrap_or_default().to_string_lossy()
            );
            s.files += 1;
            let got = parse_capture(&file)
                .and_then(|pk| samples_from_packets(&pk, &cfg.repr, Some(c as u32)));
            match got {
                Ok(got) => {
                    s.packets_seen += got.packets.packets_seen;
                    s.non_ip_dropped += got.packets.non_ip_dropped;
                    s.malformed += got.packets.malformed;
                    s.flows_seen += got.flows_seen;
                    s.flows_too_short += got.flows_too_short;
                    samples.extend(got.samples.into_iter().map(|x| x.into_bytes()));
                }
                Err(e) => {
                    log::warn!("{rel}: {e}");
                    errors.push(FileError {
                        file: rel,
                        error: e.to_string(),
                    });
                }
            }
        }
        s.samples = samples.len();
        summaries.push(s);
        per_class.push(samples);
    }

    let kept = balance_dataset(
        per_class,
        cfg.extract.limit_lower,
        cfg.extract.limit_upper,
        cfg.seed,
    )?;
    let mut classes = Vec::new();
    let mut records = Vec::new();
    for (label, (orig, samples)) in kept.into_iter().enumerate() {
        summaries[orig].kept = samples.len();
        classes.push(summaries[orig].name.clone());
        records.extend(samples.into_iter().map(|bytes| StrideRecord {
            label: Some(label as u32),
            bytes,
        }));
    }
    if records.is_empty() {
        write_summary(&a.output, &summaries, &errors)?;
        return Err(CliError::Usage("no usable flows found".into()));
    }
    let split = split_dataset(
        records,
        |r| r.label.unwrap_or(0),
        cfg.extract.split,
        cfg.seed,
    )?;
    fs::create_dir_all(&a.output).map_err(|e| io_err(&a.output, e))?;
    let header = StrideHeader::from_config(&cfg.repr, classes.len());
    let mut sizes = BTreeMap::new();
    for (name, part) in [
        ("train", split.train),
        ("val", split.val),
        ("test", split.test),
    ] {
        sizes.insert(name.to_string(), part.len());
        StrideFile {
            header,
            records: part,
        }
        .write(a.output.join(format!("{name}.nms")))?;
    }
    Manifest {
        classes,
        repr: Some(cfg.repr.clone()),
        seed: cfg.seed,
        splits: sizes.clone(),
    }
    .write(a.output.join("manifest.json"))?;
    write_summary(&a.output, &summaries, &errors)?;
    log::info!("wrote {sizes:?} samples to {}", a.output.display());
    Ok(())
}

fn write_summary(
    out: &Path,
    classes: &[ClassSummary],
    errors: &[FileError],
) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let malformed: usize = classes.iter().map(|c| c.malformed).sum();
    write_json(
        &out.join("summary.json"),
        &json!({ "classes": classes, "malformed_packets": malformed, "file_errors": errors }),
    )
}

fn load_split(path: &Path, default_split: &str) -> Result<StrideFile, CliError> {
    let file = if path.is_dir() {
        path.join(format!("{default_split}.nms"))
    } else {
        path.to_path_buf()
    };
    if !file.exists() {
        return Err(CliError::Usage(format!(
            "data file {} does not exist",
            file.display()
        )));
    }
    Ok(StrideFile::read(&file)?)
}

fn model_config(cfg: &RunConfig, header: &StrideHeader) -> ModelConfig {
    ModelConfig {
        stride_len: header.stride_len as usize,
        n_strides: header.n_strides(),
        classes: header.classes as usize,
        ..cfg.model.clone()
    }
}

fn cmd_pretrain(a: PretrainArgs) -> Result<(), CliError> {
    let cfg = load_config(
        &a.common,
        vec![
            ("pretrain.steps", flag(a.steps)),
            ("pretrain.batch", flag(a.batch)),
            ("pretrain.lr", flag(a.lr)),
        ],
    )?;
    let data = load_split(&a.data, "train")?;
    let (mut model, mut state) = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            let (m, st) = resume(&ckpt)?;
            log::info!("resuming at step {}", st.step);
            (m, st)
        }
        None => {
            let m =
                NetMamba::<f32>::new(model_config(&cfg, &data.header), Mode::Pretrain, cfg.seed)?;
            let st = OptimState::new(&m.store);
            (m, st)
        }
    };
    if model.cfg.flow_len() != data.header.flow_len()
        || model.cfg.stride_len != data.header.stride_len as usize
    {
        return Err(CliError::Usage(format!(
            "data has {} strides of {} bytes, model expects {} of {}",
            data.header.n_strides(),
            data.header.stride_len,
            model.cfg.n_strides,
            model.cfg.stride_len
        )));
    }
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let log_path = a
        .log
        .clone()
        .unwrap_or_else(|| a.output.with_file_name("loss.csv"));
    let append = a.resume.is_some() && log_path.exists();
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    if !append {
        writeln!(log_file, "step,loss,lr").map_err(|e| io_err(&log_path, e))?;
    }

    let every = cfg.checkpoint_every;
    let total = cfg.pretrain.steps;
    let out = a.output.clone();
    pretrain(
        &mut model,
        &data.records,
        &cfg.pretrain,
        &mut state,
        |row, m, st| {
            writeln!(log_file, "{},{},{}", row.step, row.loss, row.lr).map_err(|e| {
                netmamba_core::Error::Io {
                    path: log_path.clone(),
                    source: e,
                }
            })?;
            if row.step % 100 == 0 || row.step + 1 == total {
                log::info!("step {} loss {:.6} lr {:.3e}", row.step, row.loss, row.lr);
            }
            if every > 0 && (row.step + 1) % every == 0 {
                training_checkpoint(m, st).save(&out)?;
            }
            Ok(())
        },
    )?;
    training_checkpoint(&model, &state).save(&a.output)?;
    log::info!("saved {}", a.output.display());
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> Result<(), CliError> {
    let cfg = load_config(
        &a.common,
        vec![
            ("finetune.epochs", flag(a.epochs)),
            ("finetune.batch", flag(a.batch)),
            ("finetune.lr", flag(a.lr)),
        ],
    )?;
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction <= 1.0) {
        return Err(CliError::Usage("train_fraction must be in (0, 1]".into()));
    }
    let train = load_split(&a.data, "train")?;
    let val = load_split(&a.data, "val")?;
    let test = load_split(&a.data, "test")?;
    for f in [&val, &test] {
        if f.header != train.header {
            return Err(CliError::Usage(
                "train, val and test files have different layouts".into(),
            ));
        }
    }
    let mut model =
        NetMamba::<f32>::new(model_config(&cfg, &train.header), Mode::Finetune, cfg.seed)?;
    if let Some(init) = &a.init {
        Checkpoint::load(init)?.load_into(&mut model.store, NetMamba::<f32>::is_shared_param)?;
        log::info!("encoder initialized from {}", init.display());
    }
    let mut train_records = train.records;
    if cfg.train_fraction < 1.0 {
        let f = cfg.train_fraction;
        train_records = split_dataset(
            train_records,
            |r| r.label.unwrap_or(0),
            (f, 1.0 - f, 0.0),
            cfg.seed,
        )?
        .train;
        log::info!("using {} training samples", train_records.len());
    }

    let mut epoch_rows = Vec::new();
    let report = finetune(
        &mut model,
        &train_records,
        &val.records,
        &test.records,
        &cfg.finetune,
        |e| {
            log::info!(
                "epoch {} loss {:.4} val acc {:.4} lr {:.3e}",
                e.epoch,
                e.train_loss,
                e.val_accuracy,
                e.lr
            );
            epoch_rows.push(*e);
            Ok(())
        },
    )?;
    if let Some(p) = &a.log {
        let mut text = String::from("epoch,train_loss,val_accuracy,lr\n");
        for e in &epoch_rows {
            text.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.train_loss, e.val_accuracy, e.lr
            ));
        }
        fs::write(p, text).map_err(|e| io_err(p, e))?;
    }
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let mut ckpt = Checkpoint::from_model(&model, report.best_epoch as u64);
    ckpt.extra =
        json!({ "best_epoch": report.best_epoch, "best_val_accuracy": report.best_val_accuracy });
    ckpt.save(&a.output)?;
    match &a.report {
        Some(p) => write_json(p, &report)?,
        None => println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(netmamba_core::Error::from)?
        ),
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    if ckpt.mode != Mode::Finetune {
        return Err(CliError::Usage(
            "evaluation needs a fine-tuned checkpoint".into(),
        ));
    }
    let model = ckpt.to_model()?;
    let data = load_split(&a.data, "test")?;
    if data.header.n_strides() != model.cfg.n_strides
        || data.header.stride_len as usize != model.cfg.stride_len
    {
        return Err(CliError::Usage(format!(
            "data has {} strides of {} bytes, checkpoint expects {} of {}",
            data.header.n_strides(),
            data.header.stride_len,
            model.cfg.n_strides,
            model.cfg.stride_len
        )));
    }
    let report = evaluate(&model, &data.records, a.batch)?;
    let text = serde_json::to_string_pretty(&report).map_err(netmamba_core::Error::from)?;
    match &a.output {
        Some(p) => fs::write(p, format!("{text}\n")).map_err(|e| io_err(p, e))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<(), CliError> {
    let cfg = load_config(
        &a.common,
        vec![
            ("bench.batches", a.batches.clone()),
            ("bench.lengths", a.lengths.clone()),
            ("bench.runs", flag(a.runs)),
        ],
    )?;
    let base = match &a.checkpoint {
        Some(p) => Checkpoint::load(p)?.config,
        None => ModelConfig {
            stride_len: cfg.repr.stride_len,
            ..cfg.model.clone()
        },
    };
    let opts = BenchOptions {
        warmup: cfg.bench.warmup,
        runs: cfg.bench.runs.max(5),
        seed: cfg.seed,
    };
    let rows = bench_grid(
        &base,
        &cfg.bench.batches,
        &cfg.bench.lengths,
        &opts,
        &HeapProbe,
    )?;
    let mut csv = format!("{BENCH_CSV_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv_line());
        csv.push('\n');
    }
    match &a.output {
        Some(p) => fs::write(p, &csv).map_err(|e| io_err(p, e))?,
        None => print!("{csv}"),
    }
    if cfg.bench.lengths.len() >= 2 {
        for &b in &cfg.bench.batches {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.batch == b)
                .map(|r| (r.seq_len as f64, r.median_secs))
                .collect();
            let k = scaling_exponent(&pts)?;
            eprintln!("batch {b}: length scaling exponent {k:.3}");
        }
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.common, vec![])?;
    cfg.repr.validate()?;
    let caps = synth_captures(&SynthConfig {
        classes: a.classes,
        per_class: a.per_class,
        seed: cfg.seed,
        repr: cfg.repr.clone(),
    });
    for (c, flows) in caps.iter().enumerate() {
        let dir = a.output.join(format!("class_{c:02}"));
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        for (i, packets) in flows.iter().enumerate() {
            write_capture(dir.join(format!("flow_{i:04}.pcap")), packets)?;
        }
    }
    log::info!(
        "wrote {} classes x {} flows to {}",
        a.classes,
        a.per_class,
        a.output.display()
    );
    Ok(())
}
