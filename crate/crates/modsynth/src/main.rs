use clap::Parser;

fn main() {
    let cli = modsynth::cli::Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(cli.log_level()))
        .format_timestamp_millis()
        .init();
    std::process::exit(modsynth::cli::run(cli));
}
