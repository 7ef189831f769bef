//! Library side of the `netmamba` binary, split out so integration tests and
//! other tools can drive commands without spawning a process.

pub mod alloc;
pub mod commands;
pub mod config;

pub use commands::{run, Cli};
pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] netmamba_core::Error),
}

impl CliError {
    /// 0 ok, 2 usage or data error, 3 checkpoint mismatch, 4 numeric fault.
    pub fn exit_code(&self) -> i32 {
        use netmamba_core::Error as E;
        match self {
            CliError::Core(E::CheckpointMismatch { .. }) => 3,
            CliError::Core(E::NumericFault(_)) => 4,
            _ => 2,
        }
    }
}

/// Cap rayon workers from `NETMAMBA_THREADS`.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("NETMAMBA_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Usage(format!(
            "NETMAMBA_THREADS must be a positive integer, got `{v}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))
}
