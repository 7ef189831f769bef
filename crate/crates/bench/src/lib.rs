//! Shared fixtures for the criterion benches.

use netmamba_core::model::ModelConfig;

/// Encoder small enough to bench long sequences on one core.
pub fn bench_model() -> ModelConfig {
    ModelConfig {
        d_enc: 32,
        e_enc: 64,
        depth_enc: 2,
        d_dec: 16,
        e_dec: 32,
        depth_dec: 1,
        d_state: 8,
        dt_rank: 4,
        ..ModelConfig::default()
    }
}

/// Token counts (class token included) for the length sweep.
pub const LENGTHS: [usize; 3] = [401, 801, 1601];
