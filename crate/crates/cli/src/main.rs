use clap::Parser;
use netmamba_cli::alloc::TrackingAlloc;
use netmamba_cli::{init_threads, run, Cli};

#[global_allocator]
static GLOBAL: TrackingAlloc = TrackingAlloc;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = init_threads().and_then(|_| run(cli)) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
