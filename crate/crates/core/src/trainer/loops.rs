use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::MetricsReport;
use super::optim::{adamw_step, clip_grad_norm, AdamWConfig, OptimState};
use super::schedule::{scale_lr, Schedule};
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{make_mask, Checkpoint, Mode, NetMamba};
use crate::repr::StrideRecord;

fn step_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub batch: usize,
    pub steps: u64,
    pub lr: f64,
    pub warmup_frac: f64,
    pub constant_lr: bool,
    /// Multiply `lr` by `batch / 256`.
    pub scale_lr: bool,
    pub adamw: AdamWConfig,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip: f64,
    pub seed: u64,
    /// Pause before this step; the schedule still spans `steps`.
    pub stop_at: Option<u64>,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            batch: 128,
            steps: 150_000,
            lr: 1e-3,
            warmup_frac: 0.05,
            constant_lr: false,
            scale_lr: false,
            adamw: AdamWConfig::default(),
            clip: 1.0,
            seed: 0,
            stop_at: None,
        }
    }
}

fn schedule(
    lr: f64,
    batch: usize,
    scale: bool,
    constant: bool,
    total: u64,
    warmup_frac: f64,
) -> Schedule {
    let lr = if scale { scale_lr(lr, batch) } else { lr };
    if constant {
        Schedule::constant(lr)
    } else {
        Schedule::warmup_cosine(lr, total, warmup_frac)
    }
}

impl PretrainOptions {
    pub fn schedule(&self) -> Schedule {
        schedule(
            self.lr,
            self.batch,
            self.scale_lr,
            self.constant_lr,
            self.steps,
            self.warmup_frac,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

fn batch_inputs(
    model: &NetMamba<f32>,
    data: &[StrideRecord],
    idx: &[usize],
) -> Result<Tensor<f32>> {
    let flows: Vec<&[u8]> = idx.iter().map(|&i| data[i].bytes.as_slice()).collect();
    model.prepare(&flows)
}

/// Masked-reconstruction training from `state.step` up to `opts.steps`
/// (or `opts.stop_at`).
/// Batches and mask plans depend only on `(seed, step)`, so a run resumed
/// from a saved state continues exactly as an uninterrupted one.
pub fn pretrain(
    model: &mut NetMamba<f32>,
    data: &[StrideRecord],
    opts: &PretrainOptions,
    state: &mut OptimState,
    mut on_step: impl FnMut(&StepLog, &NetMamba<f32>, &OptimState) -> Result<()>,
) -> Result<Vec<StepLog>> {
    if data.is_empty() {
        return Err(Error::Config("pre-training dataset is empty".into()));
    }
    if opts.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if model.mode != Mode::Pretrain {
        return Err(Error::Contract(
            "pre-training needs a pretrain-mode model".into(),
        ));
    }
    let sched = opts.schedule();
    let seq_len = model.cfg.seq_len();
    let ratio = model.cfg.mask_ratio;
    let end = opts.stop_at.map_or(opts.steps, |s| s.min(opts.steps));
    let mut log = Vec::new();
    while state.step < end {
        let step = state.step;
        let mut rng = step_rng(opts.seed, step);
        let idx = index::sample(&mut rng, data.len(), opts.batch.min(data.len())).into_vec();
        let plans: Vec<_> = idx
            .iter()
            .map(|_| make_mask(seq_len, ratio, &mut rng))
            .collect();
        let inputs = batch_inputs(model, data, &idx)?;

        let mut g = Graph::new();
        let out = model.pretrain_forward(&mut g, &inputs, &plans)?;
        let loss = g.value(out.loss).item() as f64;
        model.store.zero_grad();
        g.backward_into(out.loss, &mut model.store)?;
        drop(g);
        clip_grad_norm(&mut model.store, opts.clip);
        let lr = sched.lr(step);
        adamw_step(&mut model.store, state, &opts.adamw, lr)?;

        let row = StepLog { step, loss, lr };
        on_step(&row, model, state)?;
        log.push(row);
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOptions {
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub constant_lr: bool,
    pub scale_lr: bool,
    pub adamw: AdamWConfig,
    pub clip: f64,
    pub seed: u64,
    pub eval_batch: usize,
    /// End early once validation accuracy reaches this value; the schedule
    /// still spans `epochs`.
    pub target_val_accuracy: Option<f64>,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            batch: 64,
            epochs: 120,
            lr: 2e-3,
            warmup_frac: 0.05,
            constant_lr: false,
            scale_lr: false,
            adamw: AdamWConfig::default(),
            clip: 1.0,
            seed: 0,
            eval_batch: 256,
            target_val_accuracy: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Test metrics of the best-validation parameters.
    pub test: Option<MetricsReport>,
}

fn check_labels(data: &[StrideRecord], classes: usize) -> Result<Vec<usize>> {
    data.iter()
        .enumerate()
        .map(|(i, r)| match r.label {
            Some(y) if (y as usize) < classes => Ok(y as usize),
            Some(y) => Err(Error::Data {
                index: i,
                msg: format!("label {y} outside [0, {classes})"),
            }),
            None => Err(Error::Data {
                index: i,
                msg: "sample is unlabeled".into(),
            }),
        })
        .collect()
}

/// Predicted class per sample.
pub fn predict(model: &NetMamba<f32>, data: &[StrideRecord], batch: usize) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(data.len());
    let c = model.cfg.classes;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(batch.max(1)) {
        let inputs = batch_inputs(model, data, chunk)?;
        let mut g = Graph::inference();
        let logits = model.finetune_forward(&mut g, &inputs)?;
        for row in g.value(logits).data().chunks(c) {
            let best = row
                .iter()
                .enumerate()
                .fold(
                    (0, f32::NEG_INFINITY),
                    |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc },
                );
            preds.push(best.0);
        }
    }
    Ok(preds)
}

pub fn evaluate(
    model: &NetMamba<f32>,
    data: &[StrideRecord],
    batch: usize,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    let labels = check_labels(data, model.cfg.classes)?;
    let preds = predict(model, data, batch)?;
    MetricsReport::from_predictions(&labels, &preds, model.cfg.classes)
}

fn accuracy(model: &NetMamba<f32>, data: &[StrideRecord], batch: usize) -> Result<f64> {
    Ok(evaluate(model, data, batch)?.accuracy)
}

/// Supervised training. After each epoch the validation accuracy decides
/// whether the parameters become the new best (ties keep the earlier epoch).
/// On return the model holds the best parameters and the test split, if
/// any, is scored once with them.
pub fn finetune(
    model: &mut NetMamba<f32>,
    train: &[StrideRecord],
    val: &[StrideRecord],
    test: &[StrideRecord],
    opts: &FinetuneOptions,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<FinetuneReport> {
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if opts.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if model.mode != Mode::Finetune {
        return Err(Error::Contract(
            "fine-tuning needs a finetune-mode model".into(),
        ));
    }
    let c = model.cfg.classes;
    let labels = check_labels(train, c)?;
    check_labels(val, c)?;
    check_labels(test, c)?;
    let select = if val.is_empty() {
        log::warn!("validation split is empty; selecting on training accuracy");
        train
    } else {
        val
    };

    let per_epoch = train.len().div_ceil(opts.batch) as u64;
    let sched = schedule(
        opts.lr,
        opts.batch,
        opts.scale_lr,
        opts.constant_lr,
        per_epoch * opts.epochs as u64,
        opts.warmup_frac,
    );
    let mut state = OptimState::new(&model.store);
    let mut best: Option<(usize, f64, Vec<Tensor<f32>>)> = None;
    let mut epochs = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut step_rng(opts.seed, epoch as u64));
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(opts.batch) {
            let inputs = batch_inputs(model, train, chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let logits = model.finetune_forward(&mut g, &inputs)?;
            let loss = model.loss_cls(&mut g, logits, &y)?;
            loss_sum += g.value(loss).item() as f64 * chunk.len() as f64;
            model.store.zero_grad();
            g.backward_into(loss, &mut model.store)?;
            drop(g);
            clip_grad_norm(&mut model.store, opts.clip);
            lr = sched.lr(state.step);
            adamw_step(&mut model.store, &mut state, &opts.adamw, lr)?;
        }
        let val_accuracy = accuracy(model, select, opts.eval_batch)?;
        let row = EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_accuracy,
            lr,
        };
        if best.as_ref().is_none_or(|b| val_accuracy > b.1) {
            let snapshot = model.store.iter().map(|(_, p)| p.value.clone()).collect();
            best = Some((epoch, val_accuracy, snapshot));
        }
        on_epoch(&row)?;
        epochs.push(row);
        if opts.target_val_accuracy.is_some_and(|t| val_accuracy >= t) {
            break;
        }
    }

    let (best_epoch, best_val_accuracy) = match best {
        Some((e, acc, values)) => {
            let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
            for (id, v) in ids.into_iter().zip(values) {
                model.store.set_value(id, v)?;
            }
            (e, acc)
        }
        None => (0, 0.0),
    };
    let test = if test.is_empty() {
        None
    } else {
        Some(evaluate(model, test, opts.eval_batch)?)
    };
    Ok(FinetuneReport {
        epochs,
        best_epoch,
        best_val_accuracy,
        test,
    })
}

const OPTIM_M: &str = "optim.m/";
const OPTIM_V: &str = "optim.v/";

/// Checkpoint carrying model parameters and optimizer moments.
pub fn training_checkpoint(model: &NetMamba<f32>, state: &OptimState) -> Checkpoint {
    let mut ckpt = Checkpoint::from_model(model, state.step);
    for ((_, p), (m, v)) in model.store.iter().zip(state.m.iter().zip(&state.v)) {
        ckpt.push(format!("{OPTIM_M}{}", p.name), m.clone());
        ckpt.push(format!("{OPTIM_V}{}", p.name), v.clone());
    }
    ckpt
}

/// Rebuild model and optimizer state from [`training_checkpoint`] output.
/// Missing moments restart the optimizer at the saved step.
pub fn resume(ckpt: &Checkpoint) -> Result<(NetMamba<f32>, OptimState)> {
    let model = ckpt.to_model()?;
    let mut state = OptimState::new(&model.store);
    state.step = ckpt.step;
    for (i, (_, p)) in model.store.iter().enumerate() {
        let m = ckpt.get(&format!("{OPTIM_M}{}", p.name));
        let v = ckpt.get(&format!("{OPTIM_V}{}", p.name));
        if let (Some(m), Some(v)) = (m, v) {
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::CheckpointMismatch {
                    name: p.name.clone(),
                    msg: "optimizer moment shape differs from parameter".into(),
                });
            }
            state.m[i] = m.clone();
            state.v[i] = v.clone();
        }
    }
    Ok((model, state))
}
