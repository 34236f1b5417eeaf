fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OSMO_LOG", "info"))
        .format_timestamp(None)
        .init();
    std::process::exit(osmotic_cli::run_cli(std::env::args_os()));
}
