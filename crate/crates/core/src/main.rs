use clap::Parser;
use stdplm::runtime::cli::{run_cli, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run_cli(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
