//! Optimization, schedules, training loops, metrics and synthetic data.

pub mod bench;
pub mod loops;
pub mod metrics;
pub mod optim;
pub mod schedule;
pub mod synth;

pub use bench::{
    bench_encoder, bench_grid, length_scaling, scaling_exponent, BenchOptions, BenchRow,
    MemoryProbe, NoProbe, BENCH_CSV_HEADER,
};
pub use loops::{
    evaluate, finetune, predict, pretrain, resume, training_checkpoint, EpochLog, FinetuneOptions,
    FinetuneReport, PretrainOptions, StepLog,
};
pub use metrics::{class_scores, MetricsReport};
pub use optim::{adamw_step, clip_grad_norm, AdamWConfig, OptimState};
pub use schedule::{scale_lr, Schedule};
pub use synth::{synth_dataset, SynthConfig};
