use clap::Parser;
use mftop::cli::{execute, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = execute(Cli::parse()) {
        eprintln!("mftop: {e}");
        std::process::exit(e.exit_code());
    }
}
