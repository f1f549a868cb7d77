use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = synthvision_cli::Cli::parse();
    if let Err(f) = synthvision_cli::run(cli) {
        eprintln!("error: {:#}", f.error);
        std::process::exit(f.code);
    }
}
