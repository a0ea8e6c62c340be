use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = livesketch::cli::Cli::parse();
    if let Err(e) = livesketch::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
