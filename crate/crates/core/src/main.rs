use clap::Parser;
use sketch2svg::cli::{execute, Cli};

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let code = execute(Cli::parse()).emit();
    std::process::exit(code);
}
