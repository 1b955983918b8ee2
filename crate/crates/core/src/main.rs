use std::io::IsTerminal;

use tracing_subscriber::EnvFilter;

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("OPTLOOP_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .with_target(false)
        .with_ansi(std::io::stderr().is_terminal())
        .init();

    // Compilers and harnesses are our children; don't leave them running.
    if let Err(e) = ctrlc::set_handler(|| {
        optloop::process::kill_live_children();
        eprintln!("interrupted");
        std::process::exit(optloop::cli::EXIT_INTERRUPTED);
    }) {
        tracing::warn!("cannot install interrupt handler: {e}");
    }

    std::process::exit(optloop::cli::main_with(std::env::args_os()));
}
